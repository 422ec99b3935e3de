import numpy as np
import pytest

from nodulegcn.errors import DimensionError, ValidationError
from nodulegcn.gcn import (
    GCNParams,
    gcn_forward,
    gcn_layer,
    init_gcn,
    nodule_labels,
    slice_to_nodule,
)
from nodulegcn.graphs import block_diag, build_graph, make_spans, normalize
from nodulegcn.tensor import Tensor, backward, cross_entropy, finite_diff_grad

from helpers import grad_rel_err


def zero_params(in_dim, hidden=32, out_dim=2, rate=0.0, dtype=np.float32):
    return GCNParams(
        w0=Tensor(np.zeros((in_dim, hidden), dtype=dtype), requires_grad=True),
        w1=Tensor(np.zeros((hidden, out_dim), dtype=dtype), requires_grad=True),
        dropout_rate=rate,
    )


class TestGcnLayer:
    def test_isolated_node_identity_weight_linear(self):
        adj = normalize(build_graph(1, "star"))
        h = Tensor(np.array([[0.3, -1.2, 4.0]], dtype=np.float32))
        w = Tensor(np.eye(3, dtype=np.float32))
        out = gcn_layer(adj, h, w, act="linear")
        np.testing.assert_allclose(out.numpy(), h.numpy(), atol=1e-7)

    def test_full_graph_constant_rows_reduce_to_dense_layer(self):
        adj = normalize(build_graph(4, "full"))
        row = np.array([0.5, -0.25, 1.0], dtype=np.float32)
        h = Tensor(np.tile(row, (4, 1)))
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(3, 2)).astype(np.float32))
        out = gcn_layer(adj, h, w, act="relu")
        expected = np.maximum(row @ w.numpy(), 0.0)
        np.testing.assert_allclose(out.numpy(), np.tile(expected, (4, 1)), atol=1e-6)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        adj = normalize(build_graph(4, "chain"))
        h = rng.normal(size=(4, 6)).astype(np.float64)
        w = rng.normal(size=(6, 3)).astype(np.float64)
        out = gcn_layer(adj, Tensor(h), Tensor(w), act="leaky_relu").numpy()
        expected = np.zeros((4, 3))
        for i in range(4):
            for o in range(3):
                acc = 0.0
                for j in range(4):
                    for d in range(6):
                        acc += adj.matrix[i, j] * h[j, d] * w[d, o]
                expected[i, o] = acc if acc >= 0 else 0.01 * acc
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_node_count_mismatch(self):
        adj = normalize(build_graph(3, "full"))
        with pytest.raises(DimensionError, match="nodes"):
            gcn_layer(adj, Tensor(np.zeros((4, 2), dtype=np.float32)),
                      Tensor(np.zeros((2, 2), dtype=np.float32)))

    def test_width_mismatch(self):
        adj = normalize(build_graph(2, "full"))
        with pytest.raises(DimensionError, match="width"):
            gcn_layer(adj, Tensor(np.zeros((2, 3), dtype=np.float32)),
                      Tensor(np.zeros((4, 2), dtype=np.float32)))


class TestGcnForward:
    def test_zero_weights_give_uniform_rows(self):
        adj = normalize(build_graph(5, "star"))
        x = Tensor(np.random.default_rng(2).normal(size=(5, 8)).astype(np.float32))
        p = gcn_forward(adj, x, zero_params(8), train_mode=False)
        np.testing.assert_allclose(p.numpy(), np.full((5, 2), 0.5), atol=1e-7)

    def test_train_mode_with_rate_zero_equals_eval(self):
        adj = normalize(build_graph(4, "chain"))
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 8)).astype(np.float32))
        params = init_gcn(in_dim=8, rng=rng)
        params.dropout_rate = 0.0
        eval_p = gcn_forward(adj, x, params, train_mode=False)
        train_p = gcn_forward(adj, x, params, train_mode=True, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(eval_p.numpy(), train_p.numpy())

    def test_rows_sum_to_one_in_all_modes(self):
        adj = normalize(build_graph(6, "full"))
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(6, 8)).astype(np.float32))
        params = init_gcn(in_dim=8, dropout_rate=0.3, rng=rng)
        for train_mode in (False, True):
            p = gcn_forward(adj, x, params, train_mode=train_mode,
                            rng=np.random.default_rng(9))
            np.testing.assert_allclose(p.numpy().sum(axis=1), np.ones(6), atol=1e-6)

    def test_train_mode_is_deterministic_under_seed(self):
        adj = normalize(build_graph(5, "chain"))
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(5, 8)).astype(np.float32))
        params = init_gcn(in_dim=8, dropout_rate=0.3, rng=rng)
        a = gcn_forward(adj, x, params, train_mode=True, rng=np.random.default_rng(42))
        b = gcn_forward(adj, x, params, train_mode=True, rng=np.random.default_rng(42))
        np.testing.assert_array_equal(a.numpy(), b.numpy())

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(6)
        adj = normalize(build_graph(4, "star"))
        x64 = rng.normal(size=(4, 5)).astype(np.float64)
        params = GCNParams(
            w0=Tensor(rng.normal(size=(5, 32)).astype(np.float64) * 0.3, requires_grad=True),
            w1=Tensor(rng.normal(size=(32, 2)).astype(np.float64) * 0.3, requires_grad=True),
            dropout_rate=0.0,
        )
        labels = np.array([0, 1, 1, 0])

        def loss_fn(_params):
            p = gcn_forward(adj, Tensor(x64), params, train_mode=False)
            return cross_entropy(p, labels)

        loss = loss_fn(None)
        grads = backward(loss, params.tensors())
        numeric = finite_diff_grad(loss_fn, params.tensors())
        for t in params.tensors():
            assert grad_rel_err(grads[t], numeric[t]) < 1e-6

    def test_block_diagonal_equals_per_nodule_concat(self):
        rng = np.random.default_rng(7)
        sizes = [3, 5, 1, 4]
        blocks = [normalize(build_graph(s, "star")) for s in sizes]
        xs = [rng.normal(size=(s, 8)).astype(np.float32) for s in sizes]
        params = init_gcn(in_dim=8, rng=rng)
        batched = gcn_forward(block_diag(blocks), Tensor(np.vstack(xs)), params)
        separate = np.vstack(
            [gcn_forward(b, Tensor(x), params).numpy() for b, x in zip(blocks, xs)]
        )
        np.testing.assert_allclose(batched.numpy(), separate, atol=1e-6)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        n = 6
        adj = normalize(build_graph(n, "chain"))
        x = rng.normal(size=(n, 8)).astype(np.float32)
        params = init_gcn(in_dim=8, rng=rng)
        perm = rng.permutation(n)
        from nodulegcn.graphs import NormalizedAdjacency

        adj_perm = NormalizedAdjacency(matrix=adj.matrix[np.ix_(perm, perm)])
        p = gcn_forward(adj, Tensor(x), params).numpy()
        p_perm = gcn_forward(adj_perm, Tensor(x[perm]), params).numpy()
        np.testing.assert_allclose(p_perm, p[perm], atol=1e-6)


class TestSliceToNodule:
    def test_mean_and_tie_rule(self):
        p = np.array([[0.8, 0.2], [0.6, 0.4], [0.1, 0.9]])
        probs = slice_to_nodule(p, [(0, 3)])
        assert probs[0] == pytest.approx(0.5)
        assert nodule_labels(probs).tolist() == [1]

    def test_single_slice_passthrough(self):
        p = np.array([[0.3, 0.7]])
        assert slice_to_nodule(p, [(0, 1)])[0] == pytest.approx(0.7)

    def test_spans_are_independent(self):
        p = np.array([[0.9, 0.1], [0.7, 0.3], [0.2, 0.8], [0.4, 0.6], [0.4, 0.6]])
        probs = slice_to_nodule(p, [(0, 2), (2, 5)])
        assert probs[0] == pytest.approx(0.2)
        assert probs[1] == pytest.approx((0.8 + 0.6 + 0.6) / 3)
        assert nodule_labels(probs).tolist() == [0, 1]

    def test_accepts_tensor_input(self):
        p = Tensor(np.array([[0.25, 0.75]], dtype=np.float32))
        assert slice_to_nodule(p, [(0, 1)])[0] == pytest.approx(0.75)

    def test_empty_span_rejected(self):
        with pytest.raises(ValidationError, match="empty span"):
            slice_to_nodule(np.array([[0.5, 0.5]]), [(0, 0), (0, 1)])

    def test_spans_must_cover_all_rows(self):
        with pytest.raises(ValidationError, match="cover"):
            slice_to_nodule(np.array([[0.5, 0.5], [0.5, 0.5]]), [(0, 1)])

    def test_spans_must_not_leave_gaps(self):
        p = np.full((4, 2), 0.5)
        with pytest.raises(ValidationError, match="gap"):
            slice_to_nodule(p, [(0, 1), (2, 4)])

    def test_make_spans_partition_round_trip(self):
        sizes = [5, 5, 3, 1]
        p = np.full((sum(sizes), 2), 0.5)
        probs = slice_to_nodule(p, make_spans(sizes))
        assert len(probs) == 4


class TestInitGcn:
    def test_shapes_and_flags(self):
        params = init_gcn(rng=np.random.default_rng(0))
        assert params.w0.shape == (512, 32)
        assert params.w1.shape == (32, 2)
        assert params.w0.requires_grad and params.w1.requires_grad
        assert params.dropout_rate == pytest.approx(0.3)

    def test_fan_in_bounds(self):
        params = init_gcn(rng=np.random.default_rng(1))
        assert np.abs(params.w0.numpy()).max() <= 1.0 / np.sqrt(512)
        assert np.abs(params.w1.numpy()).max() <= 1.0 / np.sqrt(32)

    def test_bad_dropout_rejected(self):
        with pytest.raises(ValidationError, match="dropout_rate"):
            init_gcn(dropout_rate=1.0)
