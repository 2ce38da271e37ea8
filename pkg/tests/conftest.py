import numpy as np
import pytest
import torch

from motseg.heads import ModelConfig
from motseg.synthetic import SyntheticSceneConfig, render_synthetic


@pytest.fixture(scope="session")
def small_scene():
    cfg = SyntheticSceneConfig(frames_per_sequence=3, num_sequences=2, seed=3)
    return render_synthetic(cfg)


@pytest.fixture(scope="session")
def small_samples(small_scene):
    return [s for seq in small_scene for s in seq.samples]


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(
        backbone_channels=(8, 8, 12, 16),
        blocks_per_stage=1,
        fpn_channels=16,
        num_prototypes=8,
    )


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
