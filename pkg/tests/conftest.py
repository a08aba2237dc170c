"""Shared fixtures and small numerical oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from dyndepnet import tensor as tn
from dyndepnet.config import ClassifierConfig, LearnerConfig, LossWeights, RunConfig, SyntheticSpec, TrainConfig


@pytest.fixture
def f64():
    """Run the test body in 64-bit mode and restore the previous width."""
    with tn.precision("float64"):
        yield


@pytest.fixture(autouse=True)
def _clean_tape():
    tn.get_tape().clear()
    yield
    tn.get_tape().clear()


def central_difference(fn, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = fn(x)
        flat[i] = keep - step
        lo = fn(x)
        flat[i] = keep
        out[i] = (hi - lo) / (2 * step)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def tiny_run(**train) -> RunConfig:
    """A run small enough to train in a second or two."""
    return RunConfig(
        learner=LearnerConfig(window_length=6, window_stride=3, n_layers=2, embed_dim=6, kernel_sizes=(2, 3), attn_dim=4),
        classifier=ClassifierConfig(n_layers=2, hidden_dim=3),
        loss=LossWeights(),
        train=TrainConfig(**{"batch_size": 8, "max_epochs": 3, "patience": 5, "deterministic": True, **train}),
        synth=SyntheticSpec(n_subjects=30, n_regions=4, n_timepoints=24, seed=3),
        seed=0,
    )


@pytest.fixture
def tiny_data():
    """(dataset, planted graph) for the tiny run's synthetic spec."""
    from dyndepnet.synthdata import generate

    return generate(tiny_run().synth)
