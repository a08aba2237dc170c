"""Training objective: cross-entropy plus three graph regularizers.

Each term is returned per sample (leading batch axis); callers average
over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import LossWeights
from .learner import DynamicGraph
from .tensor import Tensor

PROB_FLOOR = 1e-12
DEGREE_FLOOR = 1e-8


def cross_entropy(probs, labels) -> Tensor:
    """-log p_y per sample; ``probs`` is (N, C), ``labels`` is (N,)."""
    probs = tn.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n_classes = probs.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    onehot = np.eye(n_classes, dtype=probs.data.dtype)[labels].reshape(probs.shape)
    picked = tn.tensor_sum(probs * onehot, axis=-1)
    return -tn.log(tn.clamp_min(picked, PROB_FLOOR))


def normalized_laplacian(adjacency) -> Tensor:
    """D^-1/2 (D - A) D^-1/2, with row-sum degrees floored at ``DEGREE_FLOOR``."""
    a = tn.as_tensor(adjacency)
    v = a.shape[-1]
    degree = tn.tensor_sum(a, axis=-1)
    floored = tn.clamp_min(degree, DEGREE_FLOOR)
    inv_sqrt = tn.power(floored, -0.5)
    diag_part = tn.reshape(degree / floored, degree.shape + (1,)) * np.eye(v, dtype=a.data.dtype)
    off_part = a * tn.reshape(inv_sqrt, inv_sqrt.shape + (1,)) * tn.reshape(inv_sqrt, inv_sqrt.shape[:-1] + (1, v))
    return diag_part - off_part


def feature_smoothness(adjacency, features) -> Tensor:
    """(1/V²) Σ_t Tr(F_tᵀ L̂_t F_t) for (N, T, V, V) sequences -> (N,)."""
    a = tn.as_tensor(adjacency)
    f = tn.as_tensor(features)
    v = a.shape[-1]
    quad = tn.trace(tn.matmul(tn.swapaxes(f, -1, -2), tn.matmul(normalized_laplacian(a), f)))
    return tn.tensor_sum(quad, axis=-1) * (1.0 / v**2)


def temporal_smoothness(adjacency) -> Tensor:
    """Σ_t ‖A_t - A_{t+1}‖₁ (entrywise) -> (N,)."""
    a = tn.as_tensor(adjacency)
    if a.shape[-3] < 2:
        return tn.Tensor(np.zeros(a.shape[:-3], dtype=a.data.dtype))
    diff = a[..., 1:, :, :] - a[..., :-1, :, :]
    return tn.tensor_sum(tn.tensor_abs(diff), axis=(-3, -2, -1))


def sparsity_penalty(adjacency) -> Tensor:
    """Σ_t ‖A_t‖₁ (entrywise) -> (N,)."""
    return tn.tensor_sum(tn.tensor_abs(tn.as_tensor(adjacency)), axis=(-3, -2, -1))


@dataclass
class LossTerms:
    total: Tensor  # scalar batch mean
    cross_entropy: Tensor  # (N,)
    feature_smoothness: Tensor
    temporal_smoothness: Tensor
    sparsity: Tensor
    per_sample: Tensor  # (N,)


def total_loss(labels, probs, graph: DynamicGraph, weights: LossWeights) -> LossTerms:
    """CE + λ_FS·FS + λ_TS·TS + λ_SP·SP per sample, averaged over the batch."""
    ce = cross_entropy(probs, labels)
    fs = feature_smoothness(graph.adjacency, graph.features)
    ts = temporal_smoothness(graph.adjacency)
    sp = sparsity_penalty(graph.adjacency)
    per_sample = ce
    # zero weights drop the term from the graph entirely
    if weights.feature_smoothness:
        per_sample = per_sample + weights.feature_smoothness * fs
    if weights.temporal_smoothness:
        per_sample = per_sample + weights.temporal_smoothness * ts
    if weights.sparsity:
        per_sample = per_sample + weights.sparsity * sp
    return LossTerms(tn.mean(per_sample), ce, fs, ts, sp, per_sample)
