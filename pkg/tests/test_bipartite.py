import itertools

import numpy as np
import pytest

from rglr.bipartite import GmrfConfig, approximate, is_bipartite, kld
from rglr.errors import SingularPrecision
from rglr.graph import Graph, knn_graph, laplacian
from rglr.pointcloud import BLUE, RED
from rglr.synthetic import wave


def _dense_kld(lap_b, lap, delta):
    n = lap.shape[0]
    prec = lap + delta * np.eye(n)
    prec_b = lap_b + delta * np.eye(n)
    sigma = np.linalg.inv(prec)
    sigma_b = np.linalg.inv(prec_b)
    return 0.5 * (np.trace(prec_b @ sigma) + np.log(np.linalg.det(sigma_b @ prec)) - n)


TRIANGLE = Graph.from_edges(3, [0, 0, 1], [1, 2, 2])
PATH = Graph.from_edges(3, [0, 1], [1, 2])


def test_kld_identical_is_zero():
    L = laplacian(TRIANGLE)
    assert kld(L, L, 1.0) == pytest.approx(0.0, abs=1e-12)


def test_kld_triangle_vs_path_matches_dense():
    Lt, Lp = laplacian(TRIANGLE).toarray(), laplacian(PATH).toarray()
    assert kld(Lp, Lt, 1.0) == pytest.approx(_dense_kld(Lp, Lt, 1.0), rel=1e-10)
    assert kld(Lp, Lt, 1.0) > 0


def test_kld_asymmetric():
    Lt, Lp = laplacian(TRIANGLE).toarray(), laplacian(PATH).toarray()
    assert abs(kld(Lp, Lt, 1.0) - kld(Lt, Lp, 1.0)) > 1e-6


def test_kld_nonnegative_random(rng):
    for _ in range(20):
        n = 8
        w = np.triu(rng.random((n, n)) * (rng.random((n, n)) < 0.5), 1)
        w = w + w.T
        wb = w * (rng.random((n, n)) < 0.6)
        wb = np.triu(wb, 1) + np.triu(wb, 1).T
        L = np.diag(w.sum(1)) - w
        Lb = np.diag(wb.sum(1)) - wb
        val = kld(Lb, L, 0.1)
        assert val >= -1e-9
        assert val == pytest.approx(_dense_kld(Lb, L, 0.1), rel=1e-8, abs=1e-10)


def test_kld_singular_precision():
    L = np.array([[1.0, -1.0], [-1.0, 1.0]])
    with pytest.raises(SingularPrecision):
        kld(L, -3.0 * np.eye(2), 1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        GmrfConfig(delta=0.0)
    with pytest.raises(ValueError):
        GmrfConfig(delta=float("nan"))


def test_single_edge():
    part = approximate(Graph.from_edges(2, [0], [1]))
    assert sorted(part.labels.tolist()) == [RED, BLUE]
    assert part.kept.n_edges == 1


def test_triangle_split():
    part = approximate(TRIANGLE)
    valid = []
    for labels in itertools.product([RED, BLUE], repeat=3):
        if len(set(labels)) == 2:
            valid.append(labels)
    assert tuple(part.labels.tolist()) in valid
    assert part.kept.n_edges == 2
    assert is_bipartite(part.kept, part.labels)


def test_knn_surface_bipartite_and_retention():
    pts = wave(n=1500, seed=3)
    g = knn_graph(pts, k=6)
    part = approximate(g)
    assert is_bipartite(part.kept, part.labels)
    assert set(part.red) | set(part.blue) == set(range(g.n))
    assert not set(part.red) & set(part.blue)
    assert part.kept.n_edges >= 0.5 * g.n_edges
    # exhaustive intra-set check against the original edge list
    cross = part.labels[g.rows] != part.labels[g.cols]
    assert cross.sum() == part.kept.n_edges


def test_deterministic_with_fixed_start(rng):
    pts = rng.random((300, 3))
    g = knn_graph(pts, k=6)
    a = approximate(g, GmrfConfig(start_node=5))
    b = approximate(g, GmrfConfig(start_node=5))
    np.testing.assert_array_equal(a.labels, b.labels)


def test_random_start_seeded(rng):
    g = knn_graph(rng.random((200, 3)), k=6)
    a = approximate(g, GmrfConfig(start_node=None, seed=4))
    b = approximate(g, GmrfConfig(start_node=None, seed=4))
    np.testing.assert_array_equal(a.labels, b.labels)
    assert is_bipartite(a.kept, a.labels)


def test_path_interleaves_for_large_delta():
    n = 12
    g = Graph.from_edges(n, np.arange(n - 1), np.arange(1, n))
    part = approximate(g, GmrfConfig(delta=1e8))
    # every edge of a path survives only with an alternating coloring
    assert part.kept.n_edges == n - 1
    assert np.all(part.labels[:-1] != part.labels[1:])


def test_disconnected_components():
    g = Graph.from_edges(6, [0, 1, 3, 4], [1, 2, 4, 5])
    part = approximate(g)
    assert is_bipartite(part.kept, part.labels)
    assert part.kept.n_edges == 4
    assert np.all(part.labels >= 0)


def test_isolated_node_gets_a_color():
    g = Graph.from_edges(3, [0], [1])
    part = approximate(g)
    assert part.labels[2] in (RED, BLUE)


def test_exact_mode_matches_bipartite(rng):
    g = knn_graph(rng.random((40, 3)), k=4)
    part = approximate(g, GmrfConfig(exact=True))
    assert is_bipartite(part.kept, part.labels)


def test_partition_dump(tmp_path):
    part = approximate(Graph.from_edges(2, [0], [1]))
    path = tmp_path / "part.txt"
    part.dump(path)
    assert path.read_text().splitlines() == ["0 R", "1 B"]
