"""Training protocol: splits, oversampling, cropping, AdamW, early stopping, checkpoints."""

from __future__ import annotations

import contextlib
import csv
import json
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as tn
from .config import ConfigError, RunConfig, config_from_dict, config_to_dict
from .model import DynDepNet, ModelConfig
from .objective import total_loss
from .optim import AdamWState, adamw_step
from .synthdata import Dataset

CHECKPOINT_MAGIC = b"DDNC1"
_CKPT_HEADER = struct.Struct("<5sII")  # magic, json length, crc32 of everything after the header
METRIC_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc", "wall_ms")


class TrainingError(RuntimeError):
    """Numerical failure during optimization."""


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint."""


# ---------------------------------------------------------------------------
# data handling
# ---------------------------------------------------------------------------


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("train", "val", "test")}

    @classmethod
    def from_dict(cls, data: dict) -> "Split":
        return cls(*(np.asarray(data[k], dtype=np.int64) for k in ("train", "val", "test")))


def _allocate(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Largest-remainder apportionment, then one sample for each empty part
    with a positive ratio, taken from a part that can spare it without
    falling more than one sample below its exact share."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donors = [j for j in range(len(counts)) if counts[j] > 1 and counts[j] - 1 >= exact[j] - 1]
            if donors:
                donor = max(donors, key=lambda j: (counts[j] - exact[j], -j))
                counts[donor] -= 1
                counts[i] += 1
    return counts


def stratified_split(labels, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Split:
    """Per-class shuffled train/val/test indices preserving class proportions."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < 3:
            raise ConfigError(f"class {cls} has {members.size} samples; stratified splitting needs at least 3")
        members = rng.permutation(members)
        start = 0
        for part, count in zip(parts, _allocate(members.size, tuple(ratios))):
            part.append(members[start : start + count])
            start += count
    return Split(*(np.sort(np.concatenate(p)).astype(np.int64) for p in parts))


def oversample_minority(indices, labels, rng: np.random.Generator) -> np.ndarray:
    """Append minority-class duplicates (drawn with replacement) until classes are equal."""
    indices = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels[indices], return_counts=True)
    extras = [
        rng.choice(indices[labels[indices] == c], size=counts.max() - n, replace=True)
        for c, n in zip(classes, counts)
        if n < counts.max()
    ]
    return np.concatenate([indices, *extras]) if extras else indices


def temporal_crop(x: np.ndarray, length: int, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Contiguous window of ``length`` samples along the last axis."""
    total = x.shape[-1]
    if length > total or length < 1:
        raise ValueError(f"crop length {length} must lie in [1, {total}]")
    if mode == "eval":
        start = 0
    elif mode == "train":
        if rng is None:
            raise ValueError("train-mode cropping needs an rng")
        start = int(rng.integers(0, total - length + 1))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return x[..., start : start + length]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.meta["model"])

    @property
    def run_config(self) -> RunConfig:
        return config_from_dict(self.meta["run"])

    def build_model(self) -> DynDepNet:
        model = DynDepNet(self.model_config, seed=0)
        model.load_state_arrays({k: v for k, v in self.arrays.items() if k.startswith(("param/", "buffer/"))})
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    names = sorted(ckpt.arrays)
    table, blobs, offset = [], [], 0
    for name in names:
        arr = np.asarray(ckpt.arrays[name])
        dtype = arr.dtype.newbyteorder("<")
        blob = arr.astype(dtype, copy=False).tobytes()
        table.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": ckpt.meta, "arrays": table}, sort_keys=True, separators=(",", ":")).encode()
    body = header + b"".join(blobs)
    Path(path).write_bytes(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, len(header), zlib.crc32(body)) + body)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, json_len, crc = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    body = raw[_CKPT_HEADER.size :]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    header = json.loads(body[:json_len])
    payload = body[json_len:]
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        stop = start + count * dtype.itemsize
        if stop > len(payload):
            raise CheckpointError(f"{path}: array {entry['name']!r} runs past the payload")
        arrays[entry["name"]] = np.frombuffer(payload[start:stop], dtype=dtype).reshape(entry["shape"]).copy()
    return Checkpoint(arrays, header["meta"])


def check_compatible(ckpt: Checkpoint, dataset: Dataset) -> None:
    """Refuse data whose region count or length does not fit the checkpointed model."""
    learner = ckpt.model_config.learner
    if dataset.n_regions != learner.n_regions:
        raise CheckpointError(
            f"shape mismatch: checkpoint was trained with V={learner.n_regions}, data has V={dataset.n_regions}"
        )
    if dataset.n_timepoints < learner.n_timepoints:
        raise CheckpointError(
            f"shape mismatch: checkpoint needs T'≥{learner.n_timepoints}, data has T'={dataset.n_timepoints}"
        )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -1.0
    stopped_epoch: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best validation accuracy
    metrics: RunMetrics
    split: Split
    model: DynDepNet


@dataclass
class _LoopState:
    epoch: int
    best_val_acc: float
    best_epoch: int
    since_best: int
    best_arrays: dict[str, np.ndarray]


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ("split", "model", "oversample", "shuffle", "crop")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return dict(zip(names, (np.random.default_rng(s) for s in seqs)))


def crop_length_for(run: RunConfig, dataset: Dataset) -> int:
    length = run.train.crop_length or dataset.n_timepoints
    if length > dataset.n_timepoints:
        raise ConfigError(f"crop_length {length} exceeds the data length T'={dataset.n_timepoints}")
    return length


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    """Single-threaded BLAS so reductions happen in a fixed order."""
    if enabled:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


def predict(model: DynDepNet, signals: np.ndarray, crop_length: int, batch_size: int = 64):
    """Eval-mode probabilities, attention and adjacency for every subject (start-0 crops)."""
    probs, alphas, adjacency = [], [], []
    with tn.no_grad():
        for start in range(0, len(signals), batch_size):
            x = temporal_crop(signals[start : start + batch_size], crop_length, "eval").astype(tn.get_dtype())
            out = model.forward(x, training=False)
            probs.append(out.probs.data)
            alphas.append(out.alpha.data)
            adjacency.append(out.graph.adjacency.data)
    return np.concatenate(probs), np.concatenate(alphas), np.concatenate(adjacency)


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=-1) == labels)) if len(labels) else float("nan")


def _format_row(row: dict) -> list[str]:
    return [str(row["epoch"])] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:-1]] + [str(int(row["wall_ms"]))]


def _make_checkpoint(model, run, opt, loop, split, rngs) -> Checkpoint:
    arrays = {k: np.array(v) for k, v in model.state_arrays().items()}
    meta = {
        "format": 1,
        "model": model.config.to_dict(),
        "run": config_to_dict(run),
        "epoch": loop.epoch,
        "best_epoch": loop.best_epoch,
        "best_val_acc": loop.best_val_acc,
        "since_best": loop.since_best,
        "optimizer_step": opt.step,
        "split": split.to_dict(),
        "rng": {k: g.bit_generator.state for k, g in rngs.items()},
    }
    return Checkpoint(arrays, meta)


def _resume_state(ckpt: Checkpoint, model: DynDepNet, opt: AdamWState, rngs) -> _LoopState:
    model.load_state_arrays({k: v for k, v in ckpt.arrays.items() if k.startswith(("param/", "buffer/"))})
    opt.step = ckpt.meta["optimizer_step"]
    opt.m = {k[len("adam/m/") :]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("adam/m/")}
    opt.v = {k[len("adam/v/") :]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("adam/v/")}
    for name, state in ckpt.meta["rng"].items():
        rngs[name].bit_generator.state = state
    best = {k[len("best/") :]: v.copy() for k, v in ckpt.arrays.items() if k.startswith("best/")}
    return _LoopState(
        ckpt.meta["epoch"], ckpt.meta["best_val_acc"], ckpt.meta["best_epoch"], ckpt.meta["since_best"], best
    )


def train(
    dataset: Dataset,
    run: RunConfig,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    max_epochs: int | None = None,
    on_epoch: Callable[[dict, DynDepNet], None] | None = None,
) -> TrainResult:
    """Optimize the full model with early stopping on validation accuracy.

    With ``out_dir`` set, metrics.csv, best.ckpt and last.ckpt are written
    there every epoch.  ``resume`` restarts from a last.ckpt; ``max_epochs``
    overrides the configured cap (useful for interrupting a run).
    ``on_epoch`` is called with each metrics row and the current model.
    """
    run.validate()
    cfg = run.train
    with tn.precision(cfg.precision), deterministic_mode(cfg.deterministic):
        rngs = _rngs(run.seed)
        crop = crop_length_for(run, dataset)
        model_cfg = ModelConfig.resolve(run, dataset.n_regions, crop)
        model = DynDepNet(model_cfg, seed=int(rngs["model"].integers(2**31)))
        split = stratified_split(dataset.labels, cfg.split, seed=int(rngs["split"].integers(2**31)))
        opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        loop = _LoopState(0, -1.0, 0, 0, {k: np.array(v) for k, v in model.state_arrays().items()})
        metrics = RunMetrics()
        ckpt = load_checkpoint(resume) if resume is not None else None
        if ckpt is not None:
            if ckpt.model_config != model_cfg:
                raise CheckpointError("resume checkpoint was written for a different model configuration")
            split = Split.from_dict(ckpt.meta["split"])
        # drawn before any rng state is restored, so a resumed run sees the same list
        train_idx = oversample_minority(split.train, dataset.labels, rngs["oversample"])
        if ckpt is not None:
            loop = _resume_state(ckpt, model, opt, rngs)
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_path = out / "metrics.csv"
            if resume is None or not metrics_path.exists():
                with open(metrics_path, "w", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)
        limit = cfg.max_epochs if max_epochs is None else min(max_epochs, cfg.max_epochs)
        dtype = tn.get_dtype()

        while loop.epoch < limit and loop.since_best < cfg.patience:
            started = time.perf_counter()
            order = rngs["shuffle"].permutation(train_idx)
            loss_sum, correct = 0.0, 0
            for batch_no, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                x = np.stack([temporal_crop(dataset.signals[i], crop, "train", rngs["crop"]) for i in idx]).astype(dtype)
                y = dataset.labels[idx]
                tn.get_tape().clear()
                try:
                    result = model.forward(x, training=True)
                    loss = total_loss(y, result.probs, result.graph, run.loss).total
                    grads = tn.backward(loss, model.params.values())
                except tn.NonFiniteError as exc:
                    raise TrainingError(f"non-finite value in epoch {loop.epoch + 1}, batch {batch_no}: {exc}") from exc
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss in epoch {loop.epoch + 1}, batch {batch_no}")
                adamw_step(model.params, {k: grads[p] for k, p in model.params.items()}, opt)
                loss_sum += loss.item() * len(idx)
                correct += int(np.sum(np.argmax(result.probs.data, axis=-1) == y))
            loop.epoch += 1
            val_probs, _, _ = predict(model, dataset.signals[split.val], crop)
            val_acc = _accuracy(val_probs, dataset.labels[split.val])
            if val_acc > loop.best_val_acc:
                loop.best_val_acc, loop.best_epoch, loop.since_best = val_acc, loop.epoch, 0
                loop.best_arrays = {k: np.array(v) for k, v in model.state_arrays().items()}
            else:
                loop.since_best += 1
            wall_ms = 0 if cfg.deterministic else round((time.perf_counter() - started) * 1000)
            row = {
                "epoch": loop.epoch,
                "train_loss": loss_sum / len(order),
                "train_acc": correct / len(order),
                "val_acc": val_acc,
                "wall_ms": wall_ms,
            }
            metrics.rows.append(row)
            if on_epoch is not None:
                on_epoch(row, model)
            if out is not None:
                with open(out / "metrics.csv", "a", newline="") as fh:
                    csv.writer(fh, lineterminator="\n").writerow(_format_row(row))
                last = _make_checkpoint(model, run, opt, loop, split, rngs)
                last.arrays.update({f"adam/m/{k}": v for k, v in opt.m.items()})
                last.arrays.update({f"adam/v/{k}": v for k, v in opt.v.items()})
                last.arrays.update({f"best/{k}": v for k, v in loop.best_arrays.items()})
                save_checkpoint(last, out / "last.ckpt")

        model.load_state_arrays(loop.best_arrays)
        best = _make_checkpoint(model, run, opt, loop, split, rngs)
        best.meta["epoch"] = loop.best_epoch
        if out is not None:
            save_checkpoint(best, out / "best.ckpt")
        metrics.best_epoch, metrics.best_val_acc, metrics.stopped_epoch = loop.best_epoch, loop.best_val_acc, loop.epoch
        return TrainResult(best, metrics, split, model)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("epoch", "wall_ms") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
