"""Central finite-difference check of end-to-end gradients (64-bit)."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import ClassifierConfig, LearnerConfig, LossWeights, RunConfig
from .model import DynDepNet, ModelConfig
from .objective import total_loss

TOLERANCE = 1e-4
STEP = 1e-3
# well above central-difference rounding noise (~eps·|L|/h)
NORM_FLOOR = 1e-8


def tiny_run_config() -> RunConfig:
    """V=4, T'=24, P=6, S=3, L_G=2, K_E=6, S_m={2,3}, K_S=4, L_C=2, K_C=3, C=2."""
    return RunConfig(
        learner=LearnerConfig(
            window_length=6, window_stride=3, n_layers=2, embed_dim=6, kernel_sizes=(2, 3), attn_dim=4
        ),
        classifier=ClassifierConfig(n_layers=2, hidden_dim=3, n_classes=2),
    )


@dataclass
class GradcheckReport:
    max_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_error.values())

    def lines(self) -> list[str]:
        out = [f"{name:32s} rel_err={err:.3e} {'ok' if err < self.tolerance else 'FAIL'}" for name, err in self.max_error.items()]
        out.append(f"{'overall':32s} {'PASS' if self.passed else 'FAIL'} ({self.seconds:.1f}s, tol {self.tolerance:g})")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖a - n‖ / max(‖a‖, ‖n‖), floored so identically-zero gradients compare as noise-level."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _loss_value(model: DynDepNet, x, y, weights: LossWeights, pattern: tn.BranchPattern | None) -> float:
    with tn.no_grad(), contextlib.ExitStack() as stack:
        if pattern is not None:
            pattern.rewind()
            stack.enter_context(tn.branch_pattern(pattern))
        out = model.forward(x, training=True)
        return total_loss(y, out.probs, out.graph, weights).total.item()


def check_model(
    model: DynDepNet,
    x: np.ndarray,
    y: np.ndarray,
    weights: LossWeights,
    step: float = STEP,
    tamper: str | None = None,
    freeze_branches: bool = True,
) -> GradcheckReport:
    """Compare autodiff gradients of the loss with central differences.

    With ``freeze_branches`` the relu/abs/clamp masks of the analytic pass are
    replayed in every perturbed pass, so a pre-activation that crosses zero
    within one step does not corrupt the difference quotient.
    ``tamper`` names a parameter whose analytic gradient is deliberately
    scaled before comparison (a negative control for the checker itself).
    """
    start = time.perf_counter()
    tn.get_tape().clear()
    pattern = tn.BranchPattern() if freeze_branches else None
    with contextlib.ExitStack() as stack:
        if pattern is not None:
            stack.enter_context(tn.branch_pattern(pattern))
        out = model.forward(x, training=True)
        loss = total_loss(y, out.probs, out.graph, weights).total
    grads = tn.backward(loss, model.params.values())
    report = GradcheckReport()
    for name, p in model.params.items():
        analytic = np.array(grads[p], dtype=np.float64)
        if name == tamper:
            analytic = analytic * 1.5 + 1e-3
        numeric = np.zeros_like(analytic)
        base = p.data
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += step
            p.data = bumped.reshape(base.shape)
            up = _loss_value(model, x, y, weights, pattern)
            bumped[i] -= 2 * step
            p.data = bumped.reshape(base.shape)
            down = _loss_value(model, x, y, weights, pattern)
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        p.data = base
        report.max_error[name] = relative_error(analytic, numeric)
    report.seconds = time.perf_counter() - start
    return report


def run_gradcheck(
    run: RunConfig | None = None,
    seed: int = 0,
    n_samples: int = 4,
    tamper: str | None = None,
    freeze_branches: bool = True,
) -> GradcheckReport:
    """Build a tiny model and random data, then check every parameter in 64-bit."""
    run = run or tiny_run_config()
    with tn.precision("float64"):
        n_time = run.learner.n_timepoints or 24
        n_regions = run.learner.n_regions or 4
        config = ModelConfig.resolve(run, n_regions, n_time)
        model = DynDepNet(config, seed=seed)
        rng = np.random.default_rng(seed + 1)
        x = rng.standard_normal((n_samples, n_regions, n_time))
        y = np.arange(n_samples) % config.classifier.n_classes
        return check_model(model, x, y, run.loss, tamper=tamper, freeze_branches=freeze_branches)
