import numpy as np
import pytest
import torch

from ttts.corpus import generate_toy_corpus
from ttts.trainer import TrainConfig


TINY_DIMS = dict(
    phoneme_emb_dim=8, speaker_emb_dim=4, encoder_dim=8, decoder_dim=8, decoder_layers=1,
    postnet_dim=4, postnet_layers=2, predictor_hidden=4, ref_channels=4, ref_hidden=4,
    content_dim=4, speaker_dim=4, f0_bins=8, energy_bins=8,
)


@pytest.fixture(scope="session")
def small_manifest():
    return generate_toy_corpus(12, seed=3, n_mels=16)


@pytest.fixture(scope="session")
def toy_manifest():
    return generate_toy_corpus(20, seed=7)


def tiny_config(**overrides) -> TrainConfig:
    base = dict(TINY_DIMS, batch_size=4, lr=1e-2, seed=0, max_steps=10)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
