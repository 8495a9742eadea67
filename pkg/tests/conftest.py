import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from ccpv.datasets import generate_synthetic_dataset  # noqa: E402
from ccpv.model import BackboneConfig, create_backbone  # noqa: E402


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """6 identities x 4 images per palm, 32 px, light noise."""
    out = tmp_path_factory.mktemp("tiny") / "images"
    return generate_synthetic_dataset(6, 4, 0.02, out, seed=3, side=32)


@pytest.fixture
def tiny_model():
    cfg = BackboneConfig("compact-cnn", embedding_dim=8, image_side=32, params={"widths": (4, 4, 8, 8)})
    model = create_backbone(cfg, seed=0)
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return torch.tensor(x / np.linalg.norm(x, axis=1, keepdims=True), dtype=torch.float64)


# acceptance verdicts, printed as one block at the end of the session
_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record ``(name, ok, detail)`` for the summary, then assert ``ok``."""

    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
