"""Accent identification workbench.

kNN feature-space voice conversion for speaker augmentation, a feed-forward
accent classifier with a KL-to-uniform adversarial speaker head, and the
evaluation harness around them.
"""

from .core import (
    AidError,
    ConfigError,
    DataError,
    LabelIndex,
    NumericError,
    Provenance,
    Utterance,
    cosine_similarity,
    mean_pool,
    softmax,
)
from .corpus import (
    Corpus,
    SplitSpec,
    SynthConfig,
    class_counts,
    generate_synthetic,
    ingest,
    read_corpus,
    split_speaker_disjoint,
    write_corpus,
)
from .classifier import (
    AidModel,
    LossBreakdown,
    TrainingConfig,
    accent_embedding,
    backward,
    forward,
    kl_to_uniform,
    loss,
    train,
)
from .metrics import aecs, confusion, macro_metrics, speaker_similarity_stats
from .vc import MatchingSet, VcConfig, analyze_vc, augment_corpus, build_matching_set, knn_convert, oracle_convert
from .experiments import ExperimentSpec, run_experiment, run_matrix, run_vc_analysis

__version__ = "0.1.0"
