import numpy as np
import pytest

from gem import disgraph, numcore as nc
from gem.disgraph import DisGraph, GraphLearner
from gem.errors import DataError, ShapeError
from gem.numcore import Rng

from oracles import check_gradients


def random_graph(n=6, seed=0, eta=0.5):
    rng = Rng(seed)
    prior = np.clip(np.abs(rng.normal(n, n)) * 0.3, 0.0, 1.0)
    np.fill_diagonal(prior, 0.0)
    return DisGraph(n=n, adjacency=prior.copy(), prior=prior, eta=eta)


# ---------------------------------------------------------------------------
# init_graph


def test_init_graph_all_ones():
    s = np.ones((4, 4)) - np.eye(4)
    graph = disgraph.init_graph([s])
    expected = np.ones((4, 4)) - np.eye(4)
    assert np.array_equal(graph.prior, expected)
    assert np.array_equal(graph.adjacency, expected)


def test_init_graph_magnitude_mapping():
    s = np.full((3, 3), -0.4)
    graph = disgraph.init_graph([s])
    expected = np.full((3, 3), 0.4)
    np.fill_diagonal(expected, 0.0)
    assert np.allclose(graph.prior, expected)


def test_init_graph_single_window():
    rng = Rng(5)
    s = np.clip(rng.normal(5, 5), -1, 1)
    graph = disgraph.init_graph([s])
    expected = np.abs(s)
    np.fill_diagonal(expected, 0.0)
    assert np.allclose(graph.prior, expected)


def test_init_graph_averages_windows():
    a = np.full((3, 3), 1.0)
    b = np.full((3, 3), -0.5)
    graph = disgraph.init_graph([a, b])
    off = graph.prior[~np.eye(3, dtype=bool)]
    assert np.allclose(off, 0.25)  # |mean(1.0, -0.5)|


def test_init_graph_missing_estimates_rejected():
    s = np.zeros((3, 3))
    s[0, 1] = np.nan
    with pytest.raises(DataError):
        disgraph.init_graph([s])
    with pytest.raises(DataError):
        disgraph.init_graph([])


# ---------------------------------------------------------------------------
# augment_normalize


def test_augment_normalize_empty_graph_is_identity():
    assert np.allclose(disgraph.augment_normalize(np.zeros((4, 4))), np.eye(4))


def test_augment_normalize_all_ones_two_nodes():
    out = disgraph.augment_normalize(np.ones((2, 2)))
    assert np.allclose(out, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-12)


def test_augment_normalize_rejects_bad_input():
    with pytest.raises(ShapeError):
        disgraph.augment_normalize(np.zeros((2, 3)))
    with pytest.raises(DataError):
        disgraph.augment_normalize(np.full((3, 3), 1.5))


def test_augment_normalize_symmetric_bounded_spectrum():
    rng = Rng(7)
    for trial in range(100):
        n = 2 + int(rng.uniform(1, 1)[0, 0] * 15)
        a = rng.uniform(n, n)
        np.fill_diagonal(a, 0.0)
        out = disgraph.augment_normalize(a)
        assert np.max(np.abs(out - out.T)) <= 1e-12
        radius = np.max(np.abs(np.linalg.eigvalsh(out)))
        assert radius <= 1.0 + 1e-9


# ---------------------------------------------------------------------------
# gcn_forward


def test_gcn_identity_propagation():
    graph = DisGraph(n=3, adjacency=np.zeros((3, 3)), prior=np.zeros((3, 3)))
    learner = GraphLearner(n=3, n_layers=2, nonlinearity="identity")
    t0 = Rng(9).normal(3, 3)
    out = disgraph.gcn_forward(learner, graph, t0)
    assert np.allclose(out.value, t0, atol=1e-12)


def test_gcn_zero_weights_gives_zero():
    graph = random_graph(n=4, seed=10)
    learner = GraphLearner(n=4, n_layers=1)
    learner.params["omega_0"].value[:] = 0.0
    out = disgraph.gcn_forward(learner, graph, Rng(11).normal(4, 4))
    assert np.all(out.value == 0.0)


def test_gcn_gradients_match_finite_differences():
    graph = random_graph(n=4, seed=12)
    learner = GraphLearner(n=4, n_layers=2, rng=Rng(13))
    t0 = Rng(14).normal(4, 4)

    def forward():
        return nc.mean_all(nc.square(disgraph.gcn_forward(learner, graph, t0)))

    nc.backward(forward())
    worst, name = check_gradients(lambda: forward().item(),
                                  list(learner.params.items()))
    assert worst <= 1e-3, name


def test_gcn_shape_check():
    graph = random_graph(n=4)
    learner = GraphLearner(n=4)
    with pytest.raises(ShapeError):
        disgraph.gcn_forward(learner, graph, np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# refine_adjacency


def test_refine_eta_one_keeps_prior():
    graph = random_graph(seed=20, eta=1.0)
    refined = disgraph.refine_adjacency(graph, Rng(21).normal(6, 6))
    assert np.array_equal(refined.adjacency, graph.prior)


def test_refine_zero_embeddings_give_half_blend():
    graph = random_graph(seed=22, eta=0.5)
    refined = disgraph.refine_adjacency(graph, np.zeros((6, 6)))
    expected = 0.5 * graph.prior + 0.5 * 0.5 * (1.0 - np.eye(6))
    np.fill_diagonal(expected, 0.0)
    assert np.allclose(refined.adjacency, expected)


def test_refine_orthogonal_rows_eta_zero():
    graph = random_graph(seed=23, eta=0.0)
    refined = disgraph.refine_adjacency(graph, np.eye(6) * 0.0)
    off = refined.adjacency[~np.eye(6, dtype=bool)]
    assert np.allclose(off, 0.5)


def test_refine_keeps_entries_in_unit_interval():
    graph = random_graph(seed=24, eta=0.3)
    rng = Rng(25)
    for _ in range(50):
        graph = disgraph.refine_adjacency(graph, rng.normal(6, 6, std=5.0))
        assert np.all(graph.adjacency >= 0.0) and np.all(graph.adjacency <= 1.0)
        assert np.all(np.diag(graph.adjacency) == 0.0)


def test_refine_node_matches_pure_version():
    graph = random_graph(seed=26, eta=0.4)
    t = Rng(27).normal(6, 6)
    node = disgraph.refined_adjacency_node(graph, nc.constant(t))
    pure = disgraph.refine_adjacency(graph, t)
    assert np.allclose(node.value, pure.adjacency, atol=1e-15)


# ---------------------------------------------------------------------------
# relation_aware


def test_relation_aware_empty_graph_is_identity():
    graph = DisGraph(n=6, adjacency=np.zeros((6, 6)), prior=np.zeros((6, 6)))
    z = Rng(30).normal(5, 6)
    assert np.array_equal(disgraph.relation_aware(graph, z), z)


def test_relation_aware_single_edge():
    a = np.zeros((6, 6))
    a[0, 1] = 1.0
    graph = DisGraph(n=6, adjacency=a, prior=a)
    z = np.zeros((1, 6))
    z[0, 0] = 1.0
    out = disgraph.relation_aware(graph, z)
    expected = np.zeros((1, 6))
    expected[0, 0] = 1.0
    expected[0, 1] = 1.0
    assert np.array_equal(out, expected)


def test_relation_aware_linearity():
    graph = random_graph(seed=31)
    rng = Rng(32)
    z1, z2 = rng.normal(4, 6), rng.normal(4, 6)
    lhs = disgraph.relation_aware(graph, z1 + z2)
    rhs = disgraph.relation_aware(graph, z1) + disgraph.relation_aware(graph, z2)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_relation_aware_shape_check():
    graph = random_graph(n=6)
    with pytest.raises(ShapeError):
        disgraph.relation_aware(graph, np.zeros((4, 5)))


# ---------------------------------------------------------------------------
# graph type and file format


def test_disgraph_validation():
    with pytest.raises(DataError):
        DisGraph(n=2, adjacency=np.full((2, 2), 1.5), prior=np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        DisGraph(n=3, adjacency=np.zeros((2, 2)), prior=np.zeros((2, 2)))


def test_disgraph_diagonal_stored_as_zero():
    a = np.full((3, 3), 0.5)
    graph = DisGraph(n=3, adjacency=a, prior=a)
    assert np.all(np.diag(graph.adjacency) == 0.0)


def test_graph_file_roundtrip(tmp_path):
    graph = random_graph(seed=40, eta=0.25)
    base = str(tmp_path / "graph")
    disgraph.write_graph(graph, base, extra={"init_window": 256})
    loaded = disgraph.read_graph(base)
    assert loaded.n == graph.n
    assert loaded.eta == graph.eta
    assert loaded.node_names == graph.node_names
    assert np.array_equal(loaded.adjacency, graph.adjacency)
    assert np.array_equal(loaded.prior, graph.prior)
