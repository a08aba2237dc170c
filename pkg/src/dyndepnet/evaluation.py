"""Metrics, almost-stochastic-order testing, interpretability scores and exports."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .learner import node_features, split_windows
from .synthdata import FormatError, PlantedGraph

ASO_GRID = 100
ASO_BOOTSTRAP = 1000
ADJACENCY_MAGIC = b"DDNA1"
_ADJ_HEADER = struct.Struct("<5sIII")
TOP_FRACTION = 0.2


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"prediction and label shapes differ: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(preds == labels))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUC: P(s+ > s-) + P(s+ = s-)/2 over all positive/negative pairs."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative samples")
    ranks = stats.rankdata(scores)  # average ranks resolve ties as half-wins
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# almost stochastic order
# ---------------------------------------------------------------------------


def _quantiles(sorted_scores: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Empirical quantile function inf{x : F(x) ≥ t}; works on (..., n) arrays."""
    n = sorted_scores.shape[-1]
    idx = np.clip(np.ceil(grid * n).astype(int) - 1, 0, n - 1)
    return sorted_scores[..., idx]


def violation_ratio(qa: np.ndarray, qb: np.ndarray, degenerate: float = 0.5) -> np.ndarray:
    """Share of the squared quantile distance where A falls below B.

    Inputs are quantile functions on a common uniform grid (last axis).
    Where the two functions coincide the ratio is undefined and
    ``degenerate`` is returned.
    """
    diff2 = (qa - qb) ** 2
    total = diff2.sum(axis=-1)
    below = np.where(qa < qb, diff2, 0.0).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, below / np.where(total > 0, total, 1.0), degenerate)


def aso_epsilon_min(
    scores_a,
    scores_b,
    alpha: float = 0.05,
    n_bootstrap: int = ASO_BOOTSTRAP,
    seed: int = 0,
    grid_size: int = ASO_GRID,
) -> float:
    """Upper confidence bound on the violation ratio of "A dominates B".

    0 means A is stochastically dominant, values below 0.5 mean A almost
    dominates, about 0.5 means no order, about 1 means B dominates.
    """
    a = np.sort(np.asarray(scores_a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(scores_b, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be non-empty")
    if not (0 < alpha < 1):
        raise ValueError("alpha must lie in (0, 1)")
    grid = (np.arange(grid_size) + 0.5) / grid_size
    qa, qb = _quantiles(a, grid), _quantiles(b, grid)
    if np.array_equal(qa, qb):
        # identical empirical distributions: no order can be established
        return 0.5
    eps = float(violation_ratio(qa, qb))
    rng = np.random.default_rng(seed)
    boot_a = np.sort(rng.choice(a, size=(n_bootstrap, a.size), replace=True), axis=1)
    boot_b = np.sort(rng.choice(b, size=(n_bootstrap, b.size), replace=True), axis=1)
    boot = violation_ratio(_quantiles(boot_a, grid), _quantiles(boot_b, grid))
    scale = math.sqrt(a.size * b.size / (a.size + b.size))
    sigma = float(np.std(scale * (boot - eps)))
    return float(np.clip(eps - sigma / scale * stats.norm.ppf(alpha), 0.0, 1.0))


def bonferroni(alpha: float, m: int) -> float:
    if m < 1:
        raise ValueError("number of comparisons must be ≥ 1")
    return alpha / m


@dataclass
class AsoRow:
    model_a: str
    model_b: str
    epsilon_min: float
    alpha_adjusted: float


def compare_score_sets(
    score_sets: dict[str, np.ndarray], alpha: float = 0.05, n_bootstrap: int = ASO_BOOTSTRAP, seed: int = 0
) -> list[AsoRow]:
    """ε_min for every ordered pair, with α split over the unordered pairs."""
    names = list(score_sets)
    if len(names) < 2:
        raise ValueError("need at least two score sets to compare")
    adjusted = bonferroni(alpha, len(names) * (len(names) - 1) // 2)
    return [
        AsoRow(a, b, aso_epsilon_min(score_sets[a], score_sets[b], adjusted, n_bootstrap, seed), adjusted)
        for a in names
        for b in names
        if a != b
    ]


def write_aso_csv(rows: list[AsoRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model_a", "model_b", "epsilon_min", "alpha_adjusted"])
        writer.writerows((r.model_a, r.model_b, repr(r.epsilon_min), repr(r.alpha_adjusted)) for r in rows)


def read_scores(path: str | Path, column: str | None = None) -> np.ndarray:
    """Scores from a CSV: the named column, else ``test_acc``/``score``, else the only column."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        rows = list(reader)
    if column is None:
        for candidate in ("test_acc", "score", "accuracy"):
            if candidate in fields:
                column = candidate
                break
        else:
            if len(fields) != 1:
                raise FormatError(f"{path}: cannot tell which column holds scores among {fields}")
            column = fields[0]
    if column not in fields:
        raise FormatError(f"{path}: no column {column!r}")
    try:
        values = np.array([float(r[column]) for r in rows])
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: non-numeric score in column {column!r}") from exc
    if values.size == 0:
        raise FormatError(f"{path}: no scores")
    return values


# ---------------------------------------------------------------------------
# interpretability
# ---------------------------------------------------------------------------


@dataclass
class ImportanceReport:
    raw: np.ndarray  # (V,)
    normalized: np.ndarray  # (V,) in [0, 1]
    top: np.ndarray  # indices of the top ⌈0.2·V⌉ regions, best first
    alpha: np.ndarray  # (T,)


def min_max(z: np.ndarray) -> np.ndarray:
    """Map min to 0 and max to 1; a constant vector maps to all zeros."""
    lo, hi = z.min(), z.max()
    if hi == lo:
        return np.zeros_like(z, dtype=np.float64)
    return (z - lo) / (hi - lo)


def top_regions(z: np.ndarray, fraction: float = TOP_FRACTION) -> np.ndarray:
    """Indices of the highest scores; ties go to the lower index."""
    k = math.ceil(fraction * z.size)
    order = np.lexsort((np.arange(z.size), -z))
    return order[:k]


def region_importance(adjacency, alpha) -> ImportanceReport:
    """Attention-weighted mean in-degree: z_i = (1/T) Σ_t α_t Σ_j A_t[j, i].

    ``adjacency`` is (T, V, V) and ``alpha`` is (T,).
    """
    a = np.asarray(adjacency, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ValueError(f"adjacency must be (T, V, V), got {a.shape}")
    t = a.shape[0]
    if t == 0:
        raise ValueError("need at least one snapshot")
    if alpha.shape != (t,):
        raise ValueError(f"alpha must have length T={t}, got {alpha.shape}")
    raw = np.einsum("t,tji->i", alpha, a) / t
    return ImportanceReport(raw, min_max(raw), top_regions(raw), alpha)


def pearson_dynamic_fc(signal, window_length: int, stride: int) -> np.ndarray:
    """Sliding-window correlation mapped to [0, 1] by (r + 1)/2 -> (T, V, V)."""
    windows = split_windows(np.asarray(signal, dtype=np.float64), window_length, stride)  # (P, V, T)
    return (node_features(np.moveaxis(windows, -1, 0)) + 1.0) / 2.0


def regime_windows(bounds, window_length: int, stride: int, n_snapshots: int) -> list[np.ndarray]:
    """Snapshot indices whose window lies entirely inside each regime."""
    starts = np.arange(n_snapshots) * stride
    return [np.flatnonzero((starts >= lo) & (starts + window_length <= hi)) for lo, hi in bounds]


def edge_recovery_auc(
    adjacency, labels, planted: PlantedGraph | None, window_length: int, stride: int
) -> float:
    """Mean AUROC of learned weights against planted edges over classes and regimes.

    ``adjacency`` is (N, T, V, V) for the evaluated subjects.  For each class
    and regime the learned matrices are averaged over that class's subjects
    and the snapshots falling inside the regime, symmetrized, and scored on
    the strict upper triangle.
    """
    if planted is None:
        raise ValueError("edge recovery needs the planted graphs of a synthetic dataset")
    a = np.asarray(adjacency, dtype=np.float64)
    labels = np.asarray(labels)
    v = a.shape[-1]
    iu = np.triu_indices(v, k=1)
    windows = regime_windows(planted.bounds, window_length, stride, a.shape[1])
    scores = []
    for c in range(planted.n_classes):
        members = a[labels == c]
        if not len(members):
            continue
        for r, snaps in enumerate(windows):
            truth = planted.adjacency[c, r][iu]
            if not len(snaps) or truth.all() or not truth.any():
                continue
            mean = members[:, snaps].mean(axis=(0, 1))
            mean = (mean + mean.T) / 2
            scores.append(auroc(mean[iu], truth))
    if not scores:
        raise ValueError("no class/regime pair has snapshots inside the regime and both edge kinds")
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def write_importance_csv(report: ImportanceReport, path: str | Path) -> None:
    top = set(report.top.tolist())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["region_index", "raw_z", "normalized_z", "in_top_20pct"])
        for i, (raw, norm) in enumerate(zip(report.raw, report.normalized)):
            writer.writerow([i, repr(float(raw)), repr(float(norm)), int(i in top)])


def read_importance_csv(path: str | Path) -> ImportanceReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    raw = np.array([float(r["raw_z"]) for r in rows])
    norm = np.array([float(r["normalized_z"]) for r in rows])
    flagged = np.array([int(r["region_index"]) for r in rows if r["in_top_20pct"] == "1"])
    top = flagged[np.lexsort((flagged, -raw[flagged]))] if flagged.size else flagged
    return ImportanceReport(raw, norm, top, np.array([]))


def write_adjacency_bin(adjacency, path: str | Path) -> None:
    """(T, V, V) snapshots stored as f32 in [V][V][T] order after the header."""
    a = np.asarray(adjacency)
    t, v, _ = a.shape
    payload = np.ascontiguousarray(a.transpose(1, 2, 0), dtype="<f4").tobytes()
    Path(path).write_bytes(_ADJ_HEADER.pack(ADJACENCY_MAGIC, v, v, t) + payload)


def read_adjacency_bin(path: str | Path) -> np.ndarray:
    """Inverse of :func:`write_adjacency_bin`, returned as (T, V, V)."""
    raw = Path(path).read_bytes()
    if len(raw) < _ADJ_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, v0, v1, t = _ADJ_HEADER.unpack_from(raw)
    if magic != ADJACENCY_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[_ADJ_HEADER.size :]
    if len(body) != v0 * v1 * t * 4:
        raise FormatError(f"{path}: expected {v0 * v1 * t * 4} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(v0, v1, t).transpose(2, 0, 1).copy()
