"""Dynamic graph learner: signals -> (adjacency sequence, node-feature sequence).

Shapes are batch-first and snapshot-major: a batch of signals is
(N, V, T'), windows are (N, P, V, T), and both graph sequences are
(N, T, V, V).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .config import ConfigError, LearnerConfig, window_count
from .tensor import BatchNormState, Tensor

VARIANCE_FLOOR = 1e-8
ABLATION_KERNEL = 4


@dataclass
class DynamicGraph:
    adjacency: Tensor  # (N, T, V, V), entries in [0, 1)
    features: Tensor  # (N, T, V, V), correlations in [-1, 1]

    @property
    def n_snapshots(self) -> int:
        return self.adjacency.shape[-3]


def split_windows(x: np.ndarray, window_length: int, stride: int) -> np.ndarray:
    """Stack windows of ``x`` (..., V, T') into (..., P, V, T).

    Window ``t`` is the verbatim slice ``x[..., t*S : t*S + P]``.
    """
    x = np.asarray(x)
    n_time = x.shape[-1]
    count = window_count(n_time, window_length, stride)
    if count < 1:
        raise ConfigError(
            f"T' = {n_time} gives no windows for P = {window_length}; need T' ≥ 2P - 1 = {2 * window_length - 1}"
        )
    windows = [x[..., t * stride : t * stride + window_length] for t in range(count)]
    # (..., V, P) per window -> (..., P, V, T)
    return np.stack([np.swapaxes(w, -1, -2) for w in windows], axis=-1)


def node_features(window: np.ndarray) -> np.ndarray:
    """Pearson correlation of the columns of a (..., P, V) window."""
    w = np.asarray(window, dtype=np.float64)
    p = w.shape[-2]
    if p < 2:
        raise ValueError("node features need a window of at least two samples")
    centered = w - w.mean(axis=-2, keepdims=True)
    cov = np.swapaxes(centered, -1, -2) @ centered / (p - 1)
    scale = np.sqrt(np.maximum(np.diagonal(cov, axis1=-2, axis2=-1), 0.0))
    scale = np.maximum(scale, VARIANCE_FLOOR)
    corr = cov / scale[..., :, None] / scale[..., None, :]
    corr = np.clip(corr, -1.0, 1.0)
    idx = np.arange(corr.shape[-1])
    corr[..., idx, idx] = 1.0
    return corr


def _branch_widths(embed_dim: int, n_branches: int) -> list[int]:
    base = embed_dim // n_branches
    return [base] * (n_branches - 1) + [embed_dim - base * (n_branches - 1)]


def layer_branches(cfg: LearnerConfig, layer: int) -> list[tuple[int, int, int]]:
    """(kernel length, dilation, output channels) for each branch of ``layer``."""
    if not cfg.use_inception:
        return [(ABLATION_KERNEL, 1, cfg.embed_dim)]
    dilation = 2**layer
    widths = _branch_widths(cfg.embed_dim, len(cfg.kernel_sizes))
    return [(k, dilation, w) for k, w in zip(cfg.kernel_sizes, widths)]


def init_learner_params(cfg: LearnerConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    p, ke = cfg.window_length, cfg.embed_dim
    # the Pearson ablation has no embedding network at all
    n_layers = cfg.n_layers if cfg.use_self_attention else 0
    for layer in range(n_layers):
        c_in = p if layer == 0 else ke
        for m, (k, _, width) in enumerate(layer_branches(cfg, layer)):
            params[f"itcn.{layer}.conv{m}.weight"] = tn.parameter(
                tn.glorot_uniform(rng, (width, c_in, 1, k), c_in * k, width * k)
            )
            params[f"itcn.{layer}.conv{m}.bias"] = tn.parameter(np.zeros(width))
        if layer == 0:
            params["itcn.0.residual.weight"] = tn.parameter(tn.glorot_uniform(rng, (ke, p, 1, 1), p, ke))
        params[f"itcn.{layer}.bn.gamma"] = tn.parameter(np.ones(ke))
        params[f"itcn.{layer}.bn.beta"] = tn.parameter(np.zeros(ke))
    if cfg.use_self_attention:
        params["attention.W_Q"] = tn.parameter(tn.glorot_uniform(rng, (ke, cfg.attn_dim), ke, cfg.attn_dim))
        if not cfg.undirected:
            params["attention.W_K"] = tn.parameter(tn.glorot_uniform(rng, (ke, cfg.attn_dim), ke, cfg.attn_dim))
    if cfg.use_sparsity:
        params["threshold.theta"] = tn.parameter(np.array(cfg.threshold_init))
    for name, value in params.items():
        value.name = name
    return params


def init_learner_buffers(cfg: LearnerConfig) -> dict[str, BatchNormState]:
    if not cfg.use_self_attention:
        return {}
    return {f"itcn.{layer}.bn": BatchNormState(cfg.embed_dim) for layer in range(cfg.n_layers)}


def itcn_forward(
    windows: Tensor,
    params: dict[str, Tensor],
    cfg: LearnerConfig,
    buffers: dict[str, BatchNormState],
    training: bool,
) -> Tensor:
    """Inception TCN over the snapshot axis: (N, P, V, T) -> (N, K_E, V, T)."""
    h = tn.as_tensor(windows)
    for layer in range(cfg.n_layers):
        branches = []
        for m, (_, dilation, width) in enumerate(layer_branches(cfg, layer)):
            conv = tn.causal_conv(h, params[f"itcn.{layer}.conv{m}.weight"], dilation)
            bias = tn.reshape(params[f"itcn.{layer}.conv{m}.bias"], (1, width, 1, 1))
            branches.append(conv + bias)
        mixed = branches[0] if len(branches) == 1 else tn.concat(branches, axis=1)
        residual = tn.causal_conv(h, params["itcn.0.residual.weight"]) if layer == 0 else h
        h = tn.relu(
            tn.batch_norm(
                residual + mixed,
                params[f"itcn.{layer}.bn.gamma"],
                params[f"itcn.{layer}.bn.beta"],
                buffers[f"itcn.{layer}.bn"],
                training,
            )
        )
    return h


def attention_adjacency(embeddings: Tensor, w_query: Tensor, w_key: Tensor | None = None) -> Tensor:
    """sigmoid(Q Kᵀ / sqrt(K_S)) for (..., V, K_E) embeddings.

    With ``w_key=None`` the key projection is the query projection, and the
    logits are symmetrized so the result is exactly symmetric.
    """
    k_s = w_query.shape[-1]
    if k_s == 0:
        raise ValueError("attention width K_S must be positive")
    q = tn.matmul(embeddings, w_query)
    if w_key is None:
        logits = tn.matmul(q, tn.swapaxes(q, -1, -2))
        logits = (logits + tn.swapaxes(logits, -1, -2)) * 0.5
    else:
        logits = tn.matmul(q, tn.swapaxes(tn.matmul(embeddings, w_key), -1, -2))
    return tn.sigmoid(logits * (1.0 / math.sqrt(k_s)))


def soft_threshold(adjacency, theta) -> Tensor:
    """ReLU(a - sigmoid(theta)), elementwise."""
    return tn.relu(tn.sub(adjacency, tn.sigmoid(theta)))


def pearson_adjacency(features: np.ndarray) -> np.ndarray:
    """Correlations mapped from [-1, 1] to [0, 1] by (r + 1) / 2."""
    return (np.asarray(features) + 1.0) / 2.0


def build_dynamic_graph(
    signals: np.ndarray,
    params: dict[str, Tensor],
    cfg: LearnerConfig,
    buffers: dict[str, BatchNormState],
    training: bool,
) -> DynamicGraph:
    """Map a batch of signals (N, V, T') to its dynamic graph."""
    x = np.asarray(signals)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] != cfg.n_regions:
        raise ValueError(f"expected {cfg.n_regions} regions, got {x.shape[1]}")
    dtype = tn.get_dtype()
    windows = split_windows(x, cfg.window_length, cfg.window_stride)  # (N, P, V, T)
    per_snapshot = np.moveaxis(windows, -1, 1)  # (N, T, P, V)
    features = tn.Tensor(node_features(per_snapshot).astype(dtype))

    if cfg.use_self_attention:
        h = itcn_forward(tn.Tensor(windows.astype(dtype)), params, cfg, buffers, training)
        h = tn.transpose(h, (0, 3, 2, 1))  # (N, T, V, K_E)
        adjacency = attention_adjacency(h, params["attention.W_Q"], params.get("attention.W_K"))
    else:
        adjacency = tn.Tensor(pearson_adjacency(features.data).astype(dtype))
    if cfg.use_sparsity:
        adjacency = soft_threshold(adjacency, params["threshold.theta"])
    return DynamicGraph(adjacency, features)
