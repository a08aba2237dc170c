import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyndepnet import tensor as tn
from dyndepnet.classifier import (
    classify,
    encode_sequence,
    gcn_gate,
    graph_representation,
    gru_cell,
    init_classifier_params,
    normalize_adjacency,
    pool_nodes,
    predict_label,
    predict_proba,
    temporal_attention,
)
from dyndepnet.config import ClassifierConfig
from dyndepnet.learner import DynamicGraph

from conftest import central_difference, rel_err


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def _gru_oracle(x, h, a, w, b):
    """Plain-numpy GCN-GRU step with its own normalization."""
    a_hat = a + np.eye(a.shape[-1])
    d = a_hat.sum(axis=-1)
    norm = a_hat / np.sqrt(d[:, None] * d[None, :])
    r = _sig(norm @ np.concatenate([x, h], -1) @ w["r"] + b["r"])
    u = _sig(norm @ np.concatenate([x, h], -1) @ w["u"] + b["u"])
    c = np.tanh(norm @ np.concatenate([x, r * h], -1) @ w["c"] + b["c"])
    return u * h + (1 - u) * c, c


def _layer_params(rng, d_in, k, scale=1.0):
    w = {g: rng.normal(size=(d_in + k, k)) * scale for g in "ruc"}
    b = {g: rng.normal(size=k) * scale for g in "ruc"}
    params = {f"gru.0.W_{g}": tn.Tensor(w[g]) for g in "ruc"}
    params.update({f"gru.0.b_{g}": tn.Tensor(b[g]) for g in "ruc"})
    return params, w, b


class TestGcnGate:
    def test_empty_graph_is_linear_map(self, f64):
        rng = np.random.default_rng(0)
        f, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
        np.testing.assert_allclose(gcn_gate(f, np.zeros((4, 4)), w).data, f @ w, atol=1e-14)

    def test_two_node_closed_form(self, f64):
        # row sums of A + I are 1.5 and 1.2
        a = np.array([[0.0, 0.5], [0.2, 0.0]])
        expected = np.array([[1 / 1.5, 0.5 / math.sqrt(1.5 * 1.2)], [0.2 / math.sqrt(1.5 * 1.2), 1 / 1.2]])
        np.testing.assert_allclose(normalize_adjacency(a).data, expected, rtol=1e-14)
        f, w = np.array([[1.0, 2.0], [3.0, -1.0]]), np.array([[0.5], [1.0]])
        np.testing.assert_allclose(gcn_gate(f, a, w).data, expected @ f @ w, rtol=1e-14)

    def test_permutation_equivariance(self, f64):
        rng = np.random.default_rng(1)
        for _ in range(20):
            f, a, w = rng.normal(size=(5, 3)), rng.uniform(size=(5, 5)), rng.normal(size=(3, 4))
            perm = np.eye(5)[rng.permutation(5)]
            lhs = gcn_gate(perm @ f, perm @ a @ perm.T, w).data
            np.testing.assert_allclose(lhs, perm @ gcn_gate(f, a, w).data, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gcn_gate(np.zeros((3, 2)), np.zeros((4, 4)), np.zeros((2, 2)))


class TestGruCell:
    def test_matches_numpy_oracle(self, f64):
        rng = np.random.default_rng(2)
        params, w, b = _layer_params(rng, 3, 2)
        x, h, a = rng.normal(size=(4, 3)), rng.normal(size=(4, 2)), rng.uniform(size=(4, 4))
        out = gru_cell(x, h, normalize_adjacency(a), params, 0).data
        np.testing.assert_allclose(out, _gru_oracle(x, h, a, w, b)[0], atol=1e-12)

    @pytest.mark.parametrize("bias,target", [(60.0, "state"), (-60.0, "candidate")])
    def test_update_gate_limits(self, f64, bias, target):
        rng = np.random.default_rng(3)
        params, w, b = _layer_params(rng, 2, 3, scale=0.1)
        params["gru.0.b_u"] = tn.Tensor(np.full(3, bias))
        b["u"] = np.full(3, bias)
        x, h, a = rng.normal(size=(3, 2)), rng.normal(size=(3, 3)), rng.uniform(size=(3, 3))
        out = gru_cell(x, h, normalize_adjacency(a), params, 0).data
        expected = h if target == "state" else _gru_oracle(x, h, a, w, b)[1]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_scalar_trajectory(self, f64):
        # one node, one feature, K_C = 1: the normalized propagation is exactly 1
        ws = {"r": (0.5, -0.3), "u": (0.2, 0.4), "c": (1.0, 0.7)}
        bs = {"r": 0.1, "u": -0.2, "c": 0.05}
        xs = [1.0, -0.5, 2.0]
        h, expected = 0.0, []
        for x in xs:
            r = 1 / (1 + math.exp(-(ws["r"][0] * x + ws["r"][1] * h + bs["r"])))
            u = 1 / (1 + math.exp(-(ws["u"][0] * x + ws["u"][1] * h + bs["u"])))
            c = math.tanh(ws["c"][0] * x + ws["c"][1] * r * h + bs["c"])
            h = u * h + (1 - u) * c
            expected.append(h)
        params = {f"gru.0.W_{g}": tn.Tensor(np.array(ws[g]).reshape(2, 1)) for g in "ruc"}
        params.update({f"gru.0.b_{g}": tn.Tensor(np.array([bs[g]])) for g in "ruc"})
        graph = DynamicGraph(tn.Tensor(np.full((1, 3, 1, 1), 0.3)), tn.Tensor(np.array(xs).reshape(1, 3, 1, 1)))
        out = encode_sequence(graph, params, ClassifierConfig(n_snapshots=3, n_layers=1, hidden_dim=1))
        np.testing.assert_allclose(out[0].data.ravel(), expected, atol=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_output_is_convex_combination(self, seed):
        with tn.precision("float64"):
            rng = np.random.default_rng(seed)
            params, w, b = _layer_params(rng, 2, 3)
            x, h, a = rng.normal(size=(4, 2)), rng.normal(size=(4, 3)), rng.uniform(size=(4, 4))
            out = gru_cell(x, h, normalize_adjacency(a), params, 0).data
            c = _gru_oracle(x, h, a, w, b)[1]
            assert np.all(out >= np.minimum(h, c) - 1e-12)
            assert np.all(out <= np.maximum(h, c) + 1e-12)


class TestEncodeSequence:
    def _setup(self, rng, t=4, v=3, layers=2, k=2):
        cfg = ClassifierConfig(n_snapshots=t, n_layers=layers, hidden_dim=k)
        params = init_classifier_params(cfg, v, rng)
        graph = DynamicGraph(tn.Tensor(rng.uniform(size=(2, t, v, v))), tn.Tensor(rng.uniform(-1, 1, size=(2, t, v, v))))
        return cfg, params, graph

    def test_shape(self, f64):
        cfg, params, graph = self._setup(np.random.default_rng(0))
        out = encode_sequence(graph, params, cfg)
        assert len(out) == 2 and all(o.shape == (2, 4, 3, 2) for o in out)

    def test_unrolled_layers_match_step_by_step_cells(self, f64):
        cfg, params, graph = self._setup(np.random.default_rng(1), t=5)
        out = encode_sequence(graph, params, cfg)
        a_norm = normalize_adjacency(graph.adjacency.data).data
        layer_in = graph.features.data
        for layer in range(2):
            h = np.zeros((2, 3, 2))
            steps = []
            for t in range(5):
                h = gru_cell(layer_in[:, t], h, a_norm[:, t], params, layer).data
                steps.append(h)
            layer_in = np.stack(steps, axis=1)
            np.testing.assert_allclose(out[layer].data, layer_in, atol=1e-12)

    def test_single_snapshot_is_one_step_from_zero(self, f64):
        cfg, params, graph = self._setup(np.random.default_rng(2), t=1)
        out = encode_sequence(graph, params, cfg)[0].data[:, 0]
        a_norm = normalize_adjacency(graph.adjacency.data).data[:, 0]
        expected = gru_cell(graph.features.data[:, 0], np.zeros((2, 3, 2)), a_norm, params, 0).data
        np.testing.assert_allclose(out, expected, atol=1e-14)

    def test_zero_graph_bias_only_recurrence(self, f64):
        rng = np.random.default_rng(3)
        cfg = ClassifierConfig(n_snapshots=4, n_layers=1, hidden_dim=2)
        params = init_classifier_params(cfg, 3, rng)
        for g in "ruc":
            params[f"gru.0.b_{g}"].data = rng.normal(size=2)
        zeros = tn.Tensor(np.zeros((1, 4, 3, 3)))
        out = encode_sequence(DynamicGraph(zeros, zeros), params, cfg)[0].data[0]
        # empty graph, zero features: each node runs h ← u h + (1-u) c with only state and bias inputs
        ws = {g: params[f"gru.0.W_{g}"].data[3:] for g in "ruc"}
        bs = {g: params[f"gru.0.b_{g}"].data for g in "ruc"}
        h = np.zeros(2)
        for t in range(4):
            r = _sig(h @ ws["r"] + bs["r"])
            u = _sig(h @ ws["u"] + bs["u"])
            c = np.tanh((r * h) @ ws["c"] + bs["c"])
            h = u * h + (1 - u) * c
            np.testing.assert_allclose(out[t], np.tile(h, (3, 1)), atol=1e-14)
        assert out[0, 0] == pytest.approx((1 - _sig(bs["u"])) * np.tanh(bs["c"]), abs=1e-14)


class TestReadout:
    def test_pool_identical_nodes(self):
        emb = np.tile(np.arange(6.0).reshape(1, 1, 1, 6), (2, 3, 4, 1))
        np.testing.assert_allclose(pool_nodes([tn.Tensor(emb)]).data, emb[:, :, 0])

    def test_pool_one_hot_node(self):
        emb = np.zeros((1, 2, 5, 3))
        emb[0, :, 2] = [1.0, 2.0, 3.0]
        np.testing.assert_allclose(pool_nodes([tn.Tensor(emb)]).data[0], np.tile([0.2, 0.4, 0.6], (2, 1)))

    def test_pool_matches_direct_mean(self, f64):
        rng = np.random.default_rng(4)
        layers = [rng.normal(size=(2, 3, 4, 5)) for _ in range(3)]
        out = pool_nodes([tn.Tensor(l) for l in layers]).data
        expected = np.zeros((2, 3, 15))
        for li, l in enumerate(layers):
            for node in range(4):
                expected[..., li * 5 : (li + 1) * 5] += l[:, :, node] / 4
        np.testing.assert_allclose(out, expected, atol=1e-7)

    def test_attention_zero_weights(self):
        pooled = tn.Tensor(np.random.default_rng(5).normal(size=(2, 4, 3)))
        alpha = temporal_attention(pooled, tn.Tensor(np.zeros((4, 2))), tn.Tensor(np.zeros((2, 4)))).data
        np.testing.assert_array_equal(alpha, 0.5)

    def test_attention_two_snapshot_hand_example(self, f64):
        pooled = tn.Tensor(np.array([[[0.0, 2.0], [2.0, 4.0]]]))  # feature means 1 and 3
        w1 = tn.Tensor(np.array([[0.5], [-0.1]]))  # ReLU(0.5 - 0.3) = 0.2
        w2 = tn.Tensor(np.array([[2.0, -1.0]]))
        alpha = temporal_attention(pooled, w1, w2).data
        np.testing.assert_allclose(alpha, [[_sig(0.4), _sig(-0.2)]], rtol=1e-14)
        assert ClassifierConfig(n_snapshots=2, tau=0.5).bottleneck == 1

    def test_attention_range_and_snapshot_guard(self):
        rng = np.random.default_rng(6)
        pooled = tn.Tensor(rng.normal(size=(3, 5, 4)) * 5)
        alpha = temporal_attention(pooled, tn.Tensor(rng.normal(size=(5, 3))), tn.Tensor(rng.normal(size=(3, 5)))).data
        assert np.all((alpha > 0) & (alpha < 1))
        with pytest.raises(ValueError, match="T=5"):
            temporal_attention(tn.Tensor(np.zeros((1, 6, 4))), tn.Tensor(np.zeros((5, 3))), tn.Tensor(np.zeros((3, 5))))

    def test_representation_weighting(self, f64):
        rng = np.random.default_rng(7)
        pooled = rng.normal(size=(2, 4, 3))
        np.testing.assert_allclose(graph_representation(tn.Tensor(pooled), np.ones((2, 4))).data, pooled.sum(axis=1))
        onehot = np.zeros((2, 4))
        onehot[:, 2] = 1.0
        np.testing.assert_allclose(graph_representation(tn.Tensor(pooled), onehot).data, pooled[:, 2])
        alpha = rng.uniform(size=(2, 4))
        expected = [[sum(alpha[n, t] * pooled[n, t, f] for t in range(4)) for f in range(3)] for n in range(2)]
        np.testing.assert_allclose(graph_representation(tn.Tensor(pooled), alpha).data, expected, atol=1e-12)

    def test_probabilities(self, f64):
        h = tn.Tensor(np.random.default_rng(8).normal(size=(3, 4)))
        np.testing.assert_allclose(predict_proba(h, tn.Tensor(np.zeros((4, 3)))).data, 1 / 3)
        p = predict_proba(tn.Tensor(np.array([[1.0]])), tn.Tensor(np.array([[10.0, -10.0]]))).data[0]
        assert p[0] == pytest.approx(1.0, abs=1e-8)
        assert p[1] == pytest.approx(2.0611536e-9, rel=1e-6)
        assert predict_label(np.array([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]


class TestClassify:
    def _graph(self, rng, t=3, v=4):
        return DynamicGraph(tn.Tensor(rng.uniform(size=(2, t, v, v))), tn.Tensor(rng.uniform(-1, 1, size=(2, t, v, v))))

    def test_without_temporal_attention_sums_snapshots(self, f64):
        rng = np.random.default_rng(9)
        cfg = ClassifierConfig(n_snapshots=3, n_layers=2, hidden_dim=3, use_temporal_attention=False)
        params = init_classifier_params(cfg, 4, rng)
        graph = self._graph(rng)
        probs, alpha = classify(graph, params, cfg)
        np.testing.assert_array_equal(alpha.data, 1.0)
        pooled = pool_nodes(encode_sequence(graph, params, cfg)).data
        logits = pooled.sum(axis=1) @ params["readout.W_3"].data
        expected = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(probs.data, expected, atol=1e-12)
        assert "readout.W_1" not in params

    def test_gradients_match_finite_differences(self, f64):
        rng = np.random.default_rng(10)
        cfg = ClassifierConfig(n_snapshots=3, n_layers=2, hidden_dim=3)
        params = init_classifier_params(cfg, 4, rng)
        graph = self._graph(rng)
        probe = rng.normal(size=(2, 2))
        adjacency = tn.parameter(graph.adjacency.data)
        probs, _ = classify(DynamicGraph(adjacency, graph.features), params, cfg)
        leaves = list(params.values()) + [adjacency]
        tn.backward(tn.tensor_sum(probs * probe), wrt=leaves)
        analytic = {name: p.grad.copy() for name, p in params.items()}
        analytic["adjacency"] = adjacency.grad.copy()

        def loss(name, value):
            trial = dict(params)
            adj = graph.adjacency
            if name == "adjacency":
                adj = tn.Tensor(value)
            else:
                trial[name] = tn.Tensor(value)
            with tn.no_grad():
                return float((classify(DynamicGraph(adj, graph.features), trial, cfg)[0].data * probe).sum())

        for name, grad in analytic.items():
            start = graph.adjacency.data if name == "adjacency" else params[name].data
            numeric = central_difference(lambda v, n=name: loss(n, v), start)
            assert rel_err(grad, numeric) < 1e-4, name
