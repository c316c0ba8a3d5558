"""Feed-forward accent classifier with an adversarial speaker head.

Trunk: three affine layers (256, 128, 64 by default), each followed by batch
normalisation and ReLU. Two linear heads read the 64-dim trunk output: one for
accents, one for speakers.

The training objective for trunk + accent head is

    total = CE(accent) + lam * mean_i KL(p_speaker_i || uniform)

and the KL gradient reaches the trunk through the speaker head with the head's
weights held fixed. The speaker head itself is fitted on speaker cross-entropy
with the trunk output detached. There is no gradient-reversal layer.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    ConfigError,
    DataError,
    LabelIndex,
    NumericError,
    log_softmax,
    rng_for,
    softmax,
)

CKPT_MAGIC = b"AIDM"
CKPT_VERSION = 1
DEFAULT_HIDDEN = (256, 128, 64)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    lr_accent: float = 1e-4
    lr_speaker: float = 1e-5
    lam: float = 0.1
    batch_size: int = 32
    seed: int = 0
    batchnorm_momentum: float = 0.1
    weight_init_scale: float = 1.0
    optimizer: str = "sgd"  # sgd | momentum | adam
    momentum: float = 0.9
    hidden_sizes: tuple[int, ...] = DEFAULT_HIDDEN
    bn_eps: float = 1e-5

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (self.lr_accent > 0 and self.lr_speaker > 0):
            raise ConfigError("learning rates must be > 0")
        if not self.lam >= 0:
            raise ConfigError("lambda must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for batch statistics")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if len(self.hidden_sizes) != 3 or min(self.hidden_sizes) < 1:
            raise ConfigError("hidden_sizes must be three positive widths")
        if not 0 < self.batchnorm_momentum <= 1:
            raise ConfigError("batchnorm_momentum must lie in (0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingConfig":
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        if "hidden_sizes" in obj:
            obj["hidden_sizes"] = tuple(int(h) for h in obj["hidden_sizes"])
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    accent_ce: float
    kl_term: float
    speaker_ce: float = float("nan")


@dataclass
class ForwardOutput:
    embedding: np.ndarray
    accent_logits: np.ndarray
    speaker_logits: np.ndarray


class AidModel:
    """Parameters and batch-norm state of the classifier.

    ``params`` holds everything the optimisers touch; the speaker head lives
    under the ``speaker.`` prefix. ``buffers`` holds running statistics.
    """

    def __init__(self, input_dim: int, labels: LabelIndex, hidden_sizes=DEFAULT_HIDDEN,
                 weight_init_scale: float = 1.0, seed: int = 0, bn_momentum: float = 0.1,
                 bn_eps: float = 1e-5):
        if input_dim < 1:
            raise DataError("input_dim must be >= 1")
        if not labels.accents or not labels.speakers:
            raise DataError("model needs at least one accent and one speaker class")
        self.input_dim = int(input_dim)
        self.labels = labels
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)
        self.mode = "train"
        self.trained = False
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

        rng = rng_for(seed, "init")
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden_sizes):
            self.params[f"trunk.{i}.weight"] = self._init(rng, fan_in, width, weight_init_scale)
            self.params[f"trunk.{i}.bias"] = np.zeros(width)
            self.params[f"trunk.{i}.bn_scale"] = np.ones(width)
            self.params[f"trunk.{i}.bn_shift"] = np.zeros(width)
            self.buffers[f"trunk.{i}.running_mean"] = np.zeros(width)
            self.buffers[f"trunk.{i}.running_var"] = np.ones(width)
            fan_in = width
        self.params["accent.weight"] = self._init(rng, fan_in, len(labels.accents), weight_init_scale)
        self.params["accent.bias"] = np.zeros(len(labels.accents))
        self.params["speaker.weight"] = self._init(rng, fan_in, len(labels.speakers), weight_init_scale)
        self.params["speaker.bias"] = np.zeros(len(labels.speakers))

    @staticmethod
    def _init(rng, fan_in, fan_out, scale):
        s = scale / math.sqrt(fan_in)
        return rng.uniform(-s, s, size=(fan_in, fan_out))

    @classmethod
    def from_config(cls, input_dim: int, labels: LabelIndex, cfg: TrainingConfig) -> "AidModel":
        return cls(input_dim, labels, cfg.hidden_sizes, cfg.weight_init_scale, cfg.seed,
                   cfg.batchnorm_momentum, cfg.bn_eps)

    @property
    def n_accents(self) -> int:
        return len(self.labels.accents)

    @property
    def n_speakers(self) -> int:
        return len(self.labels.speakers)

    @property
    def embedding_dim(self) -> int:
        return self.hidden_sizes[-1]

    def train_mode(self) -> "AidModel":
        self.mode = "train"
        return self

    def eval_mode(self) -> "AidModel":
        self.mode = "eval"
        self._cache = None
        return self

    def main_param_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("speaker.")]

    def speaker_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("speaker.")]

    def copy(self) -> "AidModel":
        return copy.deepcopy(self)


def forward(model: AidModel, batch, track_running_stats: bool = True) -> ForwardOutput:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DataError(f"input has shape {x.shape}, model expects (*, {model.input_dim})")
    train = model.mode == "train"
    if train and x.shape[0] < 2:
        raise DataError("batch of 1 in train mode: batch statistics are undefined")
    p = model.params
    eps = model.bn_eps
    layers = []
    a = x
    for i in range(len(model.hidden_sizes)):
        z = a @ p[f"trunk.{i}.weight"] + p[f"trunk.{i}.bias"]
        if train:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            if track_running_stats:
                m = model.bn_momentum
                n = z.shape[0]
                rm = model.buffers[f"trunk.{i}.running_mean"]
                rv = model.buffers[f"trunk.{i}.running_var"]
                model.buffers[f"trunk.{i}.running_mean"] = (1 - m) * rm + m * mu
                model.buffers[f"trunk.{i}.running_var"] = (1 - m) * rv + m * var * n / (n - 1)
        else:
            mu = model.buffers[f"trunk.{i}.running_mean"]
            var = model.buffers[f"trunk.{i}.running_var"]
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (z - mu) * inv_std
        y = p[f"trunk.{i}.bn_scale"] * xhat + p[f"trunk.{i}.bn_shift"]
        out = np.maximum(y, 0.0)
        layers.append((a, xhat, inv_std, y))
        a = out
    acc = a @ p["accent.weight"] + p["accent.bias"]
    spk = a @ p["speaker.weight"] + p["speaker.bias"]
    model._cache = (x.copy(), layers, a) if train else None
    return ForwardOutput(a, acc, spk)


def kl_to_uniform(p) -> float | np.ndarray:
    """KL(p || uniform) = sum_i p_i log(p_i C), with 0 log 0 = 0.

    Works on a single distribution or row-wise on a batch.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise DataError("empty probability vector")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise DataError("kl_to_uniform needs a normalised probability vector")
    C = p.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p * C), 0.0)
    kl = np.maximum(terms.sum(axis=-1), 0.0)
    return float(kl) if kl.ndim == 0 else kl


def _kl_from_logits(logits: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    p = np.exp(logp)
    C = logits.shape[-1]
    return np.maximum((p * (logp + math.log(C))).sum(axis=-1), 0.0)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DataError("labels and logits are not aligned")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"label id out of range [0, {logits.shape[1]})")
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def loss(outputs: ForwardOutput, accent_labels, cfg: TrainingConfig,
         speaker_labels=None) -> LossBreakdown:
    accent_ce = _cross_entropy(outputs.accent_logits, accent_labels)
    kl = float(_kl_from_logits(outputs.speaker_logits).mean())
    speaker_ce = float("nan")
    if speaker_labels is not None:
        speaker_ce = _cross_entropy(outputs.speaker_logits, speaker_labels)
    return LossBreakdown(accent_ce + cfg.lam * kl, accent_ce, kl, speaker_ce)


def _bn_relu_backward(d_out, xhat, inv_std, y, scale):
    dy = d_out * (y > 0)
    d_scale = (dy * xhat).sum(axis=0)
    d_shift = dy.sum(axis=0)
    dxhat = dy * scale
    n = dy.shape[0]
    dz = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dz, d_scale, d_shift


def backward(model: AidModel, batch, labels_accent, labels_speaker,
             cfg: TrainingConfig) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Gradients of the two detached objectives for the last train-mode forward.

    Returns ``(grads_main, grads_speaker_head)``: d total / d(trunk, accent head)
    and d speaker-CE / d(speaker head).
    """
    x = np.asarray(batch, dtype=np.float64)
    if model._cache is None or model.mode != "train":
        raise DataError("backward needs a preceding train-mode forward")
    cached_x, layers, emb = model._cache
    if cached_x.shape != x.shape or not np.array_equal(cached_x, x):
        raise DataError("stale forward state: backward batch differs from the last forward")
    p = model.params
    n = x.shape[0]
    ya = np.asarray(labels_accent, dtype=np.int64)
    ys = np.asarray(labels_speaker, dtype=np.int64)
    acc_logits = emb @ p["accent.weight"] + p["accent.bias"]
    spk_logits = emb @ p["speaker.weight"] + p["speaker.bias"]
    for labels, C in ((ya, model.n_accents), (ys, model.n_speakers)):
        if labels.shape != (n,) or labels.min() < 0 or labels.max() >= C:
            raise DataError("label ids misaligned or out of range")

    d_acc = softmax(acc_logits)
    d_acc[np.arange(n), ya] -= 1.0
    d_acc /= n
    # d KL(softmax(z) || U) / dz_k = p_k (log p_k - sum_j p_j log p_j)
    logp = log_softmax(spk_logits)
    ps = np.exp(logp)
    d_kl = ps * (logp - (ps * logp).sum(axis=1, keepdims=True)) * (cfg.lam / n)

    grads: dict[str, np.ndarray] = {
        "accent.weight": emb.T @ d_acc,
        "accent.bias": d_acc.sum(axis=0),
    }
    d_a = d_acc @ p["accent.weight"].T + d_kl @ p["speaker.weight"].T
    for i in reversed(range(len(model.hidden_sizes))):
        a_in, xhat, inv_std, y = layers[i]
        dz, d_scale, d_shift = _bn_relu_backward(d_a, xhat, inv_std, y, p[f"trunk.{i}.bn_scale"])
        grads[f"trunk.{i}.weight"] = a_in.T @ dz
        grads[f"trunk.{i}.bias"] = dz.sum(axis=0)
        grads[f"trunk.{i}.bn_scale"] = d_scale
        grads[f"trunk.{i}.bn_shift"] = d_shift
        d_a = dz @ p[f"trunk.{i}.weight"].T

    d_spk = np.exp(logp)
    d_spk[np.arange(n), ys] -= 1.0
    d_spk /= n
    grads_speaker = {"speaker.weight": emb.T @ d_spk, "speaker.bias": d_spk.sum(axis=0)}
    return {k: grads[k] for k in model.main_param_names()}, grads_speaker


class Optimizer:
    """SGD, heavy-ball momentum or Adam over a named parameter group."""

    def __init__(self, kind: str, lr: float, momentum: float = 0.9,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.state: dict[str, list[np.ndarray]] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            if self.kind == "sgd":
                params[name] = params[name] - self.lr * g
            elif self.kind == "momentum":
                (v,) = self.state.setdefault(name, [np.zeros_like(g)])
                v = self.momentum * v + g
                self.state[name] = [v]
                params[name] = params[name] - self.lr * v
            else:
                m, v = self.state.setdefault(name, [np.zeros_like(g), np.zeros_like(g)])
                b1, b2 = self.betas
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.state[name] = [m, v]
                m_hat = m / (1 - b1 ** self.t)
                v_hat = v / (1 - b2 ** self.t)
                params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train_step(model: AidModel, x, ya, ys, cfg: TrainingConfig,
               opt_main: Optimizer, opt_speaker: Optimizer) -> LossBreakdown:
    """One simultaneous update of both parameter groups on a single batch."""
    out = forward(model, x)
    lb = loss(out, ya, cfg, ys)
    grads_main, grads_speaker = backward(model, x, ya, ys, cfg)
    opt_main.step(model.params, grads_main)
    opt_speaker.step(model.params, grads_speaker)
    return lb


def model_for(corpus, split, cfg: TrainingConfig) -> AidModel:
    """Fresh model sized for a corpus: all accents, train-split speakers."""
    train_utts = corpus.subset(split.train)
    if not train_utts:
        raise DataError("empty train split")
    labels = LabelIndex.from_labels(corpus.label_index.accents, (u.speaker for u in train_utts))
    return AidModel.from_config(corpus.dim, labels, cfg)


def stack_inputs(utterances) -> np.ndarray:
    return np.stack([u.vector() for u in utterances])


def train(model: AidModel, corpus, split, cfg: TrainingConfig,
          val_metrics: bool = True) -> tuple[AidModel, list[dict]]:
    """Train in place; returns the model in eval mode and a per-epoch log."""
    cfg.validate()
    train_utts = corpus.subset(split.train)
    if not train_utts:
        raise DataError("empty train split")
    X = stack_inputs(train_utts)
    ya = np.array([model.labels.accent_id(u.accent) for u in train_utts])
    ys = np.array([model.labels.speaker_id(u.speaker) for u in train_utts])
    val_utts = corpus.subset(split.val)
    opt_main = Optimizer(cfg.optimizer, cfg.lr_accent, cfg.momentum)
    opt_speaker = Optimizer(cfg.optimizer, cfg.lr_speaker, cfg.momentum)
    shuffle_rng = rng_for(cfg.seed, "shuffle")
    n = len(train_utts)
    log: list[dict] = []
    batch_id = 0
    for epoch in range(cfg.epochs):
        model.train_mode()
        order = shuffle_rng.permutation(n)
        parts = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            with np.errstate(invalid="ignore", over="ignore"):
                try:
                    lb = train_step(model, X[idx], ya[idx], ys[idx], cfg, opt_main, opt_speaker)
                except NumericError as exc:
                    raise NumericError(f"non-finite loss at batch {batch_id} (epoch {epoch}): {exc}") from exc
            if not all(math.isfinite(v) for v in (lb.total, lb.speaker_ce)):
                raise NumericError(f"non-finite loss at batch {batch_id} (epoch {epoch})")
            parts.append(lb)
            batch_id += 1
        entry = {"epoch": epoch}
        for key in ("total", "accent_ce", "kl_term", "speaker_ce"):
            entry[key] = float(np.mean([getattr(b, key) for b in parts])) if parts else float("nan")
        if val_metrics and val_utts:
            model.eval_mode()
            entry.update(evaluate_loss(model, val_utts, cfg, prefix="val_"))
        log.append(entry)
    model.eval_mode()
    model.trained = True
    return model, log


def predict(model: AidModel, inputs) -> np.ndarray:
    """Accent class ids for a batch of utterance vectors (eval mode)."""
    if model.mode != "eval":
        raise DataError("predict needs an eval-mode model")
    out = forward(model, np.asarray(inputs, dtype=np.float64))
    return np.argmax(out.accent_logits, axis=1)


def evaluate_loss(model: AidModel, utterances, cfg: TrainingConfig, prefix: str = "") -> dict:
    X = stack_inputs(utterances)
    out = forward(model, X)
    ya = np.array([model.labels.accent_id(u.accent) for u in utterances])
    acc_ce = _cross_entropy(out.accent_logits, ya)
    kl = float(_kl_from_logits(out.speaker_logits).mean())
    accuracy = float(np.mean(np.argmax(out.accent_logits, axis=1) == ya))
    return {f"{prefix}accent_ce": acc_ce, f"{prefix}kl_term": kl, f"{prefix}accuracy": accuracy}


def accent_embedding(model: AidModel, utterance) -> np.ndarray:
    """64-dim trunk output for one utterance (or a raw input vector)."""
    if model.mode != "eval":
        raise DataError("accent_embedding needs an eval-mode model")
    x = utterance.vector() if hasattr(utterance, "vector") else np.asarray(utterance, dtype=np.float64)
    return forward(model, x[None, :]).embedding[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: AidModel, cfg: Optional[TrainingConfig], path) -> bytes:
    tensors = list(model.params.items()) + list(model.buffers.items())
    header = {
        "input_dim": model.input_dim,
        "hidden_sizes": list(model.hidden_sizes),
        "accents": list(model.labels.accents),
        "speakers": list(model.labels.speakers),
        "bn_momentum": model.bn_momentum,
        "bn_eps": model.bn_eps,
        "mode": model.mode,
        "trained": model.trained,
        "training_config": cfg.to_json() if cfg is not None else None,
        "tensors": [[name, list(t.shape)] for name, t in tensors],
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(t, dtype="<f4").tobytes() for _, t in tensors)
    data = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(raw_header)) + raw_header + body
    if path is not None:
        from .corpus import _atomic_write
        _atomic_write(Path(path), data)
    return data


def load_checkpoint(path_or_bytes) -> tuple[AidModel, Optional[TrainingConfig]]:
    data = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise DataError("not an aidbench checkpoint")
    version, n_header = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + n_header].decode("utf-8"))
    labels = LabelIndex(tuple(header["accents"]), tuple(header["speakers"]))
    model = AidModel(header["input_dim"], labels, header["hidden_sizes"],
                     bn_momentum=header["bn_momentum"], bn_eps=header["bn_eps"])
    pos = 12 + n_header
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * count
        if name in model.params:
            model.params[name] = arr
        elif name in model.buffers:
            model.buffers[name] = arr
        else:
            raise DataError(f"unexpected tensor {name!r} in checkpoint")
    if pos != len(data):
        raise DataError("checkpoint has trailing bytes")
    model.mode = header["mode"]
    model.trained = header["trained"]
    cfg = TrainingConfig.from_json(header["training_config"]) if header["training_config"] else None
    return model, cfg
