import numpy as np
import pytest

from nodulegcn.errors import ConfigError, ValidationError
from nodulegcn.graphs import (
    TOPOLOGIES,
    NormalizedAdjacency,
    adjacency,
    block_diag,
    build_graph,
    make_spans,
    normalize,
)


class TestBuildGraph:
    def test_star_five_nodes(self):
        g = build_graph(5, "star")
        assert g.edges == frozenset({(0, 2), (1, 2), (2, 3), (2, 4)})
        assert len(g.edges) == 4

    def test_star_center_is_middle_slice(self):
        g = build_graph(4, "star")
        # center floor(4/2) = 2
        assert g.edges == frozenset({(0, 2), (1, 2), (2, 3)})

    def test_chain_edge_count(self):
        g = build_graph(5, "chain")
        assert g.edges == frozenset({(0, 1), (1, 2), (2, 3), (3, 4)})

    def test_full_edge_count(self):
        assert len(build_graph(5, "full").edges) == 10
        assert len(build_graph(8, "full").edges) == 28

    @pytest.mark.parametrize("topology", TOPOLOGIES)
    def test_single_node_has_no_edges(self, topology):
        assert build_graph(1, topology).edges == frozenset()

    @pytest.mark.parametrize("topology", TOPOLOGIES)
    def test_no_self_edges_and_indices_in_range(self, topology):
        for n in range(1, 13):
            g = build_graph(n, topology)
            for i, j in g.edges:
                assert i != j
                assert 0 <= i < n and 0 <= j < n

    def test_zero_nodes_rejected(self):
        with pytest.raises(ValidationError, match="at least one"):
            build_graph(0, "star")

    def test_unknown_topology(self):
        with pytest.raises(ConfigError, match="topology"):
            build_graph(3, "ring")


def normalize_oracle(graph):
    """Entrywise A_hat[i][j] = (A + I)[i][j] / sqrt(deg_i * deg_j)."""
    a = adjacency(graph) + np.eye(graph.n)
    deg = a.sum(axis=1)
    out = np.zeros_like(a)
    for i in range(graph.n):
        for j in range(graph.n):
            out[i, j] = a[i, j] / np.sqrt(deg[i] * deg[j])
    return out


class TestNormalize:
    @pytest.mark.parametrize("n", range(1, 7))
    def test_full_graph_entries_are_one_over_n(self, n):
        norm = normalize(build_graph(n, "full"))
        np.testing.assert_allclose(norm.matrix, np.full((n, n), 1.0 / n), atol=1e-12)

    def test_chain_three_nodes_hand_values(self):
        m = normalize(build_graph(3, "chain")).matrix
        assert m[0, 0] == pytest.approx(1 / 2)
        assert m[1, 1] == pytest.approx(1 / 3)
        assert m[2, 2] == pytest.approx(1 / 2)
        assert m[0, 1] == pytest.approx(1 / np.sqrt(6))
        assert m[1, 2] == pytest.approx(1 / np.sqrt(6))
        assert m[0, 2] == 0.0

    def test_star_five_nodes_hand_values(self):
        m = normalize(build_graph(5, "star")).matrix
        center = 2
        assert m[center, center] == pytest.approx(1 / 5)
        for leaf in (0, 1, 3, 4):
            assert m[leaf, leaf] == pytest.approx(1 / 2)
            assert m[center, leaf] == pytest.approx(1 / np.sqrt(10))
        assert m[0, 1] == 0.0

    @pytest.mark.parametrize("topology", TOPOLOGIES)
    def test_matches_entrywise_oracle(self, topology):
        for n in range(1, 13):
            g = build_graph(n, topology)
            np.testing.assert_allclose(normalize(g).matrix, normalize_oracle(g), atol=1e-12)

    @pytest.mark.parametrize("topology", TOPOLOGIES)
    def test_symmetric_nonnegative_positive_diagonal(self, topology):
        for n in range(1, 13):
            m = normalize(build_graph(n, topology)).matrix
            np.testing.assert_allclose(m, m.T, atol=1e-12)
            assert m.min() >= 0.0
            assert np.diag(m).min() > 0.0

    @pytest.mark.parametrize("topology", TOPOLOGIES)
    def test_spectral_radius_at_most_one(self, topology):
        for n in range(1, 13):
            eigs = np.linalg.eigvalsh(normalize(build_graph(n, topology)).matrix)
            assert np.abs(eigs).max() <= 1.0 + 1e-9

    def test_isolated_node_normalizes_to_one(self):
        m = normalize(build_graph(1, "chain")).matrix
        np.testing.assert_array_equal(m, np.ones((1, 1)))


class TestBlockDiag:
    def test_two_single_nodes_give_identity(self):
        blocks = [normalize(build_graph(1, "full")) for _ in range(2)]
        out = block_diag(blocks)
        np.testing.assert_array_equal(out.matrix, np.eye(2))
        assert out.spans == [(0, 1), (1, 2)]

    def test_blocks_land_on_diagonal(self):
        b1 = normalize(build_graph(2, "chain"))
        b2 = normalize(build_graph(3, "star"))
        out = block_diag([b1, b2])
        assert out.n == 5
        np.testing.assert_array_equal(out.matrix[:2, :2], b1.matrix)
        np.testing.assert_array_equal(out.matrix[2:, 2:], b2.matrix)
        assert not out.matrix[:2, 2:].any()
        assert not out.matrix[2:, :2].any()

    def test_row_sums_concatenate(self):
        b1 = normalize(build_graph(4, "chain"))
        b2 = normalize(build_graph(5, "full"))
        out = block_diag([b1, b2])
        expected = np.concatenate([b1.matrix.sum(axis=1), b2.matrix.sum(axis=1)])
        np.testing.assert_allclose(out.matrix.sum(axis=1), expected, atol=1e-12)

    def test_overlapping_spans_rejected(self):
        blocks = [normalize(build_graph(2, "full")), normalize(build_graph(2, "full"))]
        with pytest.raises(ValidationError, match="contiguous"):
            block_diag(blocks, spans=[(0, 2), (1, 3)])

    def test_span_size_mismatch_rejected(self):
        blocks = [normalize(build_graph(3, "full"))]
        with pytest.raises(ValidationError, match="does not fit"):
            block_diag(blocks, spans=[(0, 2)])

    def test_make_spans(self):
        assert make_spans([2, 3, 1]) == [(0, 2), (2, 5), (5, 6)]
        with pytest.raises(ValidationError, match="positive"):
            make_spans([2, 0])

    def test_non_square_matrix_rejected(self):
        with pytest.raises(ValidationError, match="square"):
            NormalizedAdjacency(matrix=np.zeros((2, 3)))
