import pytest

from aidbench.corpus import SynthConfig, generate_synthetic, split_speaker_disjoint


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SynthConfig(n_accents=3, speakers_per_accent=4, utterances_per_speaker=3, frame_dim=6,
                      t_min=3, t_max=6, noise_scale=0.1, pool_speakers=4, seed=11)
    corpus = generate_synthetic(cfg)
    return corpus, split_speaker_disjoint(corpus, 0.5, 0.25, 3)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
