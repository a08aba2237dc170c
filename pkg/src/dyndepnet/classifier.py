"""Dynamic graph classifier: GCN-gated GRU, node pooling, temporal attention readout."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .config import ClassifierConfig
from .learner import DynamicGraph
from .tensor import Tensor

DEGREE_FLOOR = 1e-8
GATES = ("r", "u", "c")


def init_classifier_params(cfg: ClassifierConfig, n_features: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Weights for every layer; gate matrices are (D_in + K_C) x K_C."""
    params: dict[str, Tensor] = {}
    k = cfg.hidden_dim
    for layer in range(cfg.n_layers):
        d_in = n_features if layer == 0 else k
        for gate in GATES:
            params[f"gru.{layer}.W_{gate}"] = tn.parameter(tn.glorot_uniform(rng, (d_in + k, k), d_in + k, k))
            params[f"gru.{layer}.b_{gate}"] = tn.parameter(np.zeros(k))
    width = k * cfg.n_layers
    if cfg.use_temporal_attention:
        t, b = cfg.n_snapshots, cfg.bottleneck
        params["readout.W_1"] = tn.parameter(tn.glorot_uniform(rng, (t, b), t, b))
        params["readout.W_2"] = tn.parameter(tn.glorot_uniform(rng, (b, t), b, t))
    params["readout.W_3"] = tn.parameter(tn.glorot_uniform(rng, (width, cfg.n_classes), width, cfg.n_classes))
    for name, value in params.items():
        value.name = name
    return params


def normalize_adjacency(adjacency) -> Tensor:
    """D^-1/2 (A + I) D^-1/2 with degrees floored at ``DEGREE_FLOOR``."""
    a = tn.as_tensor(adjacency)
    v = a.shape[-1]
    a_hat = a + np.eye(v, dtype=a.data.dtype)
    inv_sqrt = tn.power(tn.clamp_min(tn.tensor_sum(a_hat, axis=-1), DEGREE_FLOOR), -0.5)
    return a_hat * tn.reshape(inv_sqrt, inv_sqrt.shape + (1,)) * tn.reshape(inv_sqrt, inv_sqrt.shape[:-1] + (1, v))


def gcn_gate(features, adjacency, weight) -> Tensor:
    """Normalized propagation followed by a linear map: Â_n F W."""
    return tn.matmul(tn.matmul(normalize_adjacency(adjacency), features), weight)


def gru_cell(x, h_prev, a_norm, params: dict[str, Tensor], layer: int) -> Tensor:
    """One GCN-GRU step for (..., V, D_in) input and (..., V, K_C) state.

    ``a_norm`` is the already-normalized propagation matrix for this snapshot.
    """
    x, h_prev = tn.as_tensor(x), tn.as_tensor(h_prev)
    xh = tn.concat([x, h_prev], axis=-1)
    prop = tn.matmul(a_norm, xh)
    r = tn.sigmoid(tn.matmul(prop, params[f"gru.{layer}.W_r"]) + params[f"gru.{layer}.b_r"])
    u = tn.sigmoid(tn.matmul(prop, params[f"gru.{layer}.W_u"]) + params[f"gru.{layer}.b_u"])
    xrh = tn.concat([x, r * h_prev], axis=-1)
    c = tn.tanh(tn.matmul(tn.matmul(a_norm, xrh), params[f"gru.{layer}.W_c"]) + params[f"gru.{layer}.b_c"])
    return u * h_prev + (1.0 - u) * c


def _run_layer(inputs: Tensor, a_norm_steps: list[Tensor], a_norm: Tensor, params, layer: int, k: int) -> Tensor:
    """Unroll one layer over all snapshots; ``inputs`` is (N, T, V, D_in).

    Algebraically the same as calling :func:`gru_cell` per step, but the part
    of each gate that depends only on the layer input is computed for all
    snapshots at once.
    """
    d_in = inputs.shape[-1]
    w = {g: params[f"gru.{layer}.W_{g}"] for g in GATES}
    w_in = tn.concat([w[g][:d_in] for g in GATES], axis=-1)  # (D_in, 3K)
    bias = tn.concat([params[f"gru.{layer}.b_{g}"] for g in GATES], axis=-1)
    from_input = tn.matmul(tn.matmul(a_norm, inputs), w_in) + bias  # (N, T, V, 3K)
    w_state_ru = tn.concat([w["r"][d_in:], w["u"][d_in:]], axis=-1)  # (K, 2K)
    w_state_c = w["c"][d_in:]

    n, t, v = inputs.shape[0], inputs.shape[1], inputs.shape[2]
    h = tn.Tensor(np.zeros((n, v, k), dtype=inputs.data.dtype))
    outputs = []
    for step, pre in enumerate(tn.unstack(from_input, axis=1)):
        a_t = a_norm_steps[step]
        ru = tn.sigmoid(pre[..., : 2 * k] + tn.matmul(tn.matmul(a_t, h), w_state_ru))
        r, u = ru[..., :k], ru[..., k:]
        c = tn.tanh(pre[..., 2 * k :] + tn.matmul(tn.matmul(a_t, r * h), w_state_c))
        h = u * h + (1.0 - u) * c
        outputs.append(h)
    return tn.stack(outputs, axis=1)


def encode_sequence(graph: DynamicGraph, params: dict[str, Tensor], cfg: ClassifierConfig) -> list[Tensor]:
    """Per-layer node embeddings, each (N, T, V, K_C); states start at zero."""
    a_norm = normalize_adjacency(graph.adjacency)
    a_steps = tn.unstack(a_norm, axis=1)
    layer_input = graph.features
    outputs = []
    for layer in range(cfg.n_layers):
        layer_input = _run_layer(layer_input, a_steps, a_norm, params, layer, cfg.hidden_dim)
        outputs.append(layer_input)
    return outputs


def pool_nodes(layer_outputs: list[Tensor]) -> Tensor:
    """Concatenate layers on the feature axis and average over nodes -> (N, T, K_C·L_C)."""
    stacked = layer_outputs[0] if len(layer_outputs) == 1 else tn.concat(layer_outputs, axis=-1)
    return tn.mean(stacked, axis=-2)


def temporal_attention(pooled: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Snapshot scores sigmoid(ReLU(ψ H W_1) W_2), shape (N, T)."""
    if pooled.shape[-2] != w1.shape[0]:
        raise ValueError(f"temporal attention was built for T={w1.shape[0]}, got T={pooled.shape[-2]}")
    squeezed = tn.mean(pooled, axis=-1, keepdims=False)  # (N, T)
    row = tn.reshape(squeezed, squeezed.shape[:-1] + (1, squeezed.shape[-1]))
    scores = tn.sigmoid(tn.matmul(tn.relu(tn.matmul(row, w1)), w2))
    return tn.reshape(scores, squeezed.shape)


def graph_representation(pooled: Tensor, alpha) -> Tensor:
    """Σ_t α_t H_t -> (N, K_C·L_C)."""
    alpha = tn.as_tensor(alpha)
    return tn.tensor_sum(pooled * tn.reshape(alpha, alpha.shape + (1,)), axis=-2)


def predict_proba(representation: Tensor, w3: Tensor) -> Tensor:
    return tn.softmax(tn.matmul(representation, w3), axis=-1)


def predict_label(probs: np.ndarray) -> np.ndarray:
    """argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=-1)


def classify(graph: DynamicGraph, params: dict[str, Tensor], cfg: ClassifierConfig) -> tuple[Tensor, Tensor]:
    """Return (class probabilities (N, C), temporal attention (N, T))."""
    pooled = pool_nodes(encode_sequence(graph, params, cfg))
    if cfg.use_temporal_attention:
        alpha = temporal_attention(pooled, params["readout.W_1"], params["readout.W_2"])
    else:
        alpha = tn.Tensor(np.ones(pooled.shape[:-1], dtype=pooled.data.dtype))
    probs = predict_proba(graph_representation(pooled, alpha), params["readout.W_3"])
    return probs, alpha
