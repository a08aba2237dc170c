"""Synthetic multivariate series with planted, class- and regime-dependent graphs.

Each subject follows a piecewise-stationary VAR(1) process whose transition
matrix in every regime is the spectrally normalized planted adjacency of the
subject's class.  The dataset directory format is defined here as well.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .config import ConfigError, SyntheticSpec

DATA_MAGIC = b"DDNT"
PLANTED_MAGIC = b"DDNP"
FORMAT_VERSION = 1
BURN_IN = 50
MAX_GRAPH_DRAWS = 1000
_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass
class Dataset:
    signals: np.ndarray  # (N, V, T') float32
    labels: np.ndarray  # (N,) int64
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.signals = np.asarray(self.signals, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.signals.ndim != 3:
            raise ValueError(f"signals must be (N, V, T'), got shape {self.signals.shape}")
        if self.labels.shape != (self.signals.shape[0],):
            raise ValueError("labels must hold one entry per subject")

    def __len__(self) -> int:
        return self.signals.shape[0]

    @property
    def n_regions(self) -> int:
        return self.signals.shape[1]

    @property
    def n_timepoints(self) -> int:
        return self.signals.shape[2]

    def subset(self, index) -> "Dataset":
        return Dataset(self.signals[index], self.labels[index], dict(self.meta))


@dataclass
class PlantedGraph:
    adjacency: np.ndarray  # (C, R, V, V) uint8, symmetric, zero diagonal
    bounds: list[tuple[int, int]]  # half-open [start, stop) per regime

    @property
    def n_classes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_regimes(self) -> int:
        return self.adjacency.shape[1]


def regime_bounds(n_timepoints: int, n_regimes: int) -> list[tuple[int, int]]:
    """Equal contiguous segments partitioning [0, T')."""
    edges = [(r * n_timepoints) // n_regimes for r in range(n_regimes + 1)]
    return [(edges[r], edges[r + 1]) for r in range(n_regimes)]


def edge_count(spec: SyntheticSpec) -> int:
    v = spec.n_regions
    return int(round(spec.density * v * (v - 1) / 2))


def class_margin(spec: SyntheticSpec) -> int:
    """Minimum number of differing undirected edges between the two class graphs."""
    return math.ceil(0.2 * spec.density * spec.n_regions**2)


def _random_graph(rng: np.random.Generator, v: int, n_edges: int) -> np.ndarray:
    iu = np.triu_indices(v, k=1)
    chosen = rng.choice(iu[0].size, size=n_edges, replace=False)
    adj = np.zeros((v, v), dtype=np.uint8)
    adj[iu[0][chosen], iu[1][chosen]] = 1
    return adj | adj.T


def plant_graphs(spec: SyntheticSpec, rng: np.random.Generator) -> PlantedGraph:
    """Draw one graph per class and regime; class graphs differ by at least the margin."""
    v, c, r = spec.n_regions, spec.n_classes, spec.n_regimes
    n_edges = edge_count(spec)
    margin = class_margin(spec) if n_edges else 0
    iu = np.triu_indices(v, k=1)
    adjacency = np.zeros((c, r, v, v), dtype=np.uint8)
    for regime in range(r):
        for _ in range(MAX_GRAPH_DRAWS):
            graphs = [_random_graph(rng, v, n_edges) for _ in range(c)]
            diffs = [
                int(np.sum(graphs[a][iu] != graphs[b][iu])) for a in range(c) for b in range(a + 1, c)
            ]
            if min(diffs) >= margin:
                break
        else:
            raise ConfigError(f"cannot plant class graphs differing by {margin} edges at this density")
        adjacency[:, regime] = np.stack(graphs)
    return PlantedGraph(adjacency, regime_bounds(spec.n_timepoints, r))


def transition_matrix(adjacency: np.ndarray, coupling: float) -> np.ndarray:
    """γ·W/‖W‖₂, whose spectral radius is γ for symmetric W."""
    w = np.asarray(adjacency, dtype=np.float64)
    if coupling == 0:
        return np.zeros_like(w)
    norm = np.linalg.norm(w, 2)
    if not np.isfinite(norm) or norm <= 0:
        raise ConfigError("degenerate planted graph: cannot normalize an empty transition matrix")
    return coupling * w / norm


def simulate_subject(
    transitions: np.ndarray, bounds: list[tuple[int, int]], noise: float, rng: np.random.Generator
) -> np.ndarray:
    """Run the piecewise VAR(1) process and z-score each region -> (V, T')."""
    v = transitions.shape[-1]
    n_time = bounds[-1][1]
    x = np.zeros(v)
    for _ in range(BURN_IN):
        x = transitions[0] @ x + noise * rng.standard_normal(v)
    out = np.empty((v, n_time))
    for regime, (start, stop) in enumerate(bounds):
        for t in range(start, stop):
            x = transitions[regime] @ x + noise * rng.standard_normal(v)
            out[:, t] = x
    mean = out.mean(axis=1, keepdims=True)
    std = out.std(axis=1, keepdims=True)
    return (out - mean) / np.where(std > 0, std, 1.0)


def generate(spec: SyntheticSpec) -> tuple[Dataset, PlantedGraph]:
    """Balanced two-class dataset plus the graphs that generated it."""
    spec.validate()
    n_edges = edge_count(spec)
    if spec.density > 0 and n_edges == 0:
        raise ConfigError("degenerate planted graph: density rounds to zero edges")
    graph_seq, label_seq, *subject_seqs = np.random.SeedSequence(spec.seed).spawn(spec.n_subjects + 2)
    planted = plant_graphs(spec, np.random.default_rng(graph_seq))
    labels = np.random.default_rng(label_seq).permutation(np.arange(spec.n_subjects) % spec.n_classes)
    # no edges means pure noise
    coupling = spec.coupling if n_edges else 0.0
    transitions = np.stack(
        [
            np.stack([transition_matrix(planted.adjacency[c, r], coupling) for r in range(spec.n_regimes)])
            for c in range(spec.n_classes)
        ]
    )
    signals = np.stack(
        [
            simulate_subject(transitions[label], planted.bounds, spec.noise, np.random.default_rng(seq))
            for label, seq in zip(labels, subject_seqs)
        ]
    )
    meta = {"spec": dataclasses.asdict(spec), "planted_file": "planted.bin", "regime_bounds": planted.bounds}
    return Dataset(signals, labels, meta), planted


# ---------------------------------------------------------------------------
# signal-strength diagnostic
# ---------------------------------------------------------------------------


def lag1_cross_correlation(segment: np.ndarray) -> np.ndarray:
    """Symmetrized corr(x_i[t], x_j[t+1]) for a (V, L) segment -> (V, V)."""
    a, b = segment[:, :-1], segment[:, 1:]
    a = (a - a.mean(axis=1, keepdims=True)) / np.maximum(a.std(axis=1, keepdims=True), 1e-12)
    b = (b - b.mean(axis=1, keepdims=True)) / np.maximum(b.std(axis=1, keepdims=True), 1e-12)
    c = a @ b.T / a.shape[1]
    return (c + c.T) / 2


def edge_contrast_pvalue(dataset: Dataset, planted: PlantedGraph) -> float:
    """One-sided rank-sum p that lag-1 correlation is higher on planted edges.

    Correlations are averaged over the subjects of each class within each
    regime, then edge pairs are compared with non-edge pairs.
    """
    v = dataset.n_regions
    iu = np.triu_indices(v, k=1)
    on, off = [], []
    for c in range(planted.n_classes):
        members = dataset.signals[dataset.labels == c].astype(np.float64)
        if not len(members):
            continue
        for r, (start, stop) in enumerate(planted.bounds):
            if stop - start < 3:
                continue
            mean_corr = np.mean([lag1_cross_correlation(x[:, start:stop]) for x in members], axis=0)[iu]
            mask = planted.adjacency[c, r][iu].astype(bool)
            on.extend(mean_corr[mask])
            off.extend(mean_corr[~mask])
    if not on or not off:
        return 1.0
    return float(stats.mannwhitneyu(on, off, alternative="greater").pvalue)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def _read_block(path: Path, magic: bytes) -> tuple[tuple[int, int, int], np.ndarray]:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path.name}: truncated header")
    found, version, d0, d1, d2 = _HEADER.unpack_from(raw)
    if found != magic:
        raise FormatError(f"{path.name}: bad magic {found!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path.name}: unsupported version {version}")
    return (d0, d1, d2), raw[_HEADER.size :]


def write_dataset(dataset: Dataset, directory: str | Path, planted: PlantedGraph | None = None) -> Path:
    """Write data.bin, labels.csv, meta.json and (optionally) planted.bin."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    n, v, t = dataset.signals.shape
    payload = np.ascontiguousarray(dataset.signals, dtype="<f4").tobytes()
    (out / "data.bin").write_bytes(_HEADER.pack(DATA_MAGIC, FORMAT_VERSION, n, v, t) + payload)
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "label"])
        writer.writerows((i, int(y)) for i, y in enumerate(dataset.labels))
    meta = dict(dataset.meta)
    if planted is not None:
        c, r = planted.adjacency.shape[:2]
        body = np.ascontiguousarray(planted.adjacency, dtype=np.uint8).tobytes()
        (out / "planted.bin").write_bytes(_HEADER.pack(PLANTED_MAGIC, FORMAT_VERSION, c, r, v) + body)
        meta["planted_file"] = "planted.bin"
        meta["regime_bounds"] = [list(b) for b in planted.bounds]
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def read_dataset(directory: str | Path) -> Dataset:
    src = Path(directory)
    (n, v, t), body = _read_block(src / "data.bin", DATA_MAGIC)
    expected = n * v * t * 4
    if len(body) != expected:
        raise FormatError(f"data.bin: header promises {expected} payload bytes for N={n}, V={v}, T'={t}, found {len(body)}")
    signals = np.frombuffer(body, dtype="<f4").reshape(n, v, t).astype(np.float32)
    labels = np.full(n, -1, dtype=np.int64)
    with open(src / "labels.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["subject_id", "label"]:
            raise FormatError(f"labels.csv: expected header subject_id,label, got {reader.fieldnames}")
        for row in reader:
            idx = int(row["subject_id"])
            if not 0 <= idx < n:
                raise FormatError(f"labels.csv: subject_id {idx} out of range for N={n}")
            labels[idx] = int(row["label"])
    if (labels < 0).any():
        raise FormatError("labels.csv: missing labels for some subjects")
    meta_path = src / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return Dataset(signals, labels, meta)


def read_planted(directory: str | Path) -> PlantedGraph:
    src = Path(directory)
    (c, r, v), body = _read_block(src / "planted.bin", PLANTED_MAGIC)
    if len(body) != c * r * v * v:
        raise FormatError(f"planted.bin: expected {c * r * v * v} bytes for C={c}, R={r}, V={v}, found {len(body)}")
    adjacency = np.frombuffer(body, dtype=np.uint8).reshape(c, r, v, v).copy()
    meta_path = src / "meta.json"
    bounds = None
    if meta_path.exists():
        bounds = json.loads(meta_path.read_text()).get("regime_bounds")
    if bounds is None:
        raise FormatError("meta.json lacks regime_bounds for the planted graphs")
    return PlantedGraph(adjacency, [tuple(b) for b in bounds])
