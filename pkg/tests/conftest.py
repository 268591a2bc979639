import numpy as np
import pytest
import torch

from cicam.backbone import BackboneConfig
from cicam.model import ModelConfig, build_model

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


def tiny_config(**kw) -> ModelConfig:
    """Small float64 network for exact numerical checks."""
    defaults = dict(
        num_classes=3,
        image_size=16,
        backbone=BackboneConfig([4, 6], [0, 1], 2),
        dtype="float64",
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


def randomize_(model, seed=0, scale=0.3):
    """Give every parameter (zero-initialized ones included) a nonzero random value."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
