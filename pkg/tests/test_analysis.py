import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from nssl import analysis as A
from nssl.errors import ValidationError


def brute_morans(x, neighbors):
    n = len(x)
    w = np.zeros((n, n))
    for i in range(n):
        for j in neighbors[i]:
            w[i, j] = 1.0
    xb = x.mean()
    num = 0.0
    for i in range(n):
        for j in range(n):
            num += w[i, j] * (x[i] - xb) * (x[j] - xb)
    den = sum((xi - xb) ** 2 for xi in x)
    return n / w.sum() * num / den


def brute_knn(x, k):
    n = len(x)
    out = []
    for i in range(n):
        d = [(float(np.sum((x[i] - x[j]) ** 2)), j) for j in range(n) if j != i]
        d.sort()
        out.append([j for _, j in d[:k]])
    return np.array(out)


# PCA --------------------------------------------------------------------------------


def test_pca_full_rank_reconstruction():
    x = np.random.default_rng(0).normal(size=(30, 6))
    p = A.pca_fit(x, 6)
    assert np.abs(p.inverse_transform(p.transform(x)) - x).max() < 1e-6
    np.testing.assert_allclose(p.components @ p.components.T, np.eye(6), atol=1e-10)
    assert np.all(np.diff(p.explained_variance) <= 1e-12)


def test_pca_line_in_3d():
    r = np.random.default_rng(1)
    t = r.normal(size=100)
    x = np.outer(t, [1.0, 2.0, -0.5]) + 1e-4 * r.normal(size=(100, 3))
    p = A.pca_fit(x, 2)
    assert p.explained_variance[0] / np.var(x, axis=0, ddof=1).sum() > 0.999


def test_pca_scores_covariance_diagonal():
    x = np.random.default_rng(2).normal(size=(200, 8)) @ np.random.default_rng(3).normal(size=(8, 8))
    p = A.pca_fit(x, 5)
    cov = np.cov(p.transform(x).T)
    off = cov - np.diag(np.diag(cov))
    assert np.abs(off).max() < 1e-8
    np.testing.assert_allclose(np.diag(cov), p.explained_variance, rtol=1e-10)


def test_pca_rank_error():
    x = np.outer(np.arange(10.0), [1, 1, 1])
    with pytest.raises(ValidationError):
        A.pca_fit(x, 2)


# shift metrics ------------------------------------------------------------------------


def test_identity_shift_exact():
    e = np.random.default_rng(4).normal(size=(150, 20))
    rep = A.shift_metrics(e, [e, e.copy()], k=10, pca_dim=8)
    assert np.all(rep.rmse == 0.0) and np.all(rep.cosine == 1.0) and np.all(rep.overlap == 1.0)


def test_random_gaussian_overlap_near_chance():
    r = np.random.default_rng(5)
    n, k = 300, 20
    e = r.normal(size=(n, 16))
    rep = A.shift_metrics(e, [r.normal(size=(n, 16)) for _ in range(3)], k=k, pca_dim=16)
    expected = k / (n - 1)
    # per-cell overlap is hypergeometric; the mean over n cells has sd ~ sqrt(p(1-p)/(k n))
    sd = np.sqrt(expected * (1 - expected) / (k * n))
    assert np.all(np.abs(rep.overlap - expected) < 3 * sd + 1e-3)


def test_rotation_after_projection_keeps_neighbours():
    r = np.random.default_rng(6)
    p = r.normal(size=(120, 10))
    q = ortho_group.rvs(10, random_state=7)
    rep = A.shift_metrics_projected(p, [p @ q], k=15)
    assert rep.overlap[0] == 1.0 and rep.rmse[0] > 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_overlap_invariant_to_shared_isometry(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(60, 5)), r.normal(size=(60, 5))
    q = ortho_group.rvs(5, random_state=seed % 1000)
    t = r.normal(size=5)
    base = A.shift_metrics_projected(a, [b], k=7).overlap
    moved = A.shift_metrics_projected(a @ q + t, [b @ q + t], k=7).overlap
    assert base[0] == pytest.approx(moved[0], abs=1e-12)


def test_shift_requires_more_cells_than_k():
    with pytest.raises(ValidationError):
        A.shift_metrics(np.eye(10), [np.eye(10)], k=10)


def test_shift_report_tsv():
    e = np.random.default_rng(8).normal(size=(50, 4))
    rep = A.shift_metrics(e, [e + 0.1, e - 0.1], k=5, names=["r1", "r2"])
    txt = rep.to_tsv().splitlines()
    assert txt[0] == "reference\trmse\tcosine\toverlap" and txt[1].startswith("r1\t") and len(txt) == 5


# kNN and Moran's I --------------------------------------------------------------------------


def test_collinear_points_k1():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    assert A.knn_indices(x, 1)[1, 0] == 0


def test_complete_graph_minus_self():
    x = np.random.default_rng(9).normal(size=(7, 3))
    nn = A.knn_indices(x, 6)
    for i in range(7):
        assert sorted(nn[i]) == [j for j in range(7) if j != i]


def test_knn_matches_brute_force():
    x = A.l2_rows(np.random.default_rng(10).normal(size=(200, 5)))
    np.testing.assert_array_equal(A.knn_indices(x, 8), brute_knn(x, 8))


def test_duplicate_rows_tie_break_by_index():
    x = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nn = A.knn_indices(x, 2)
    assert nn[0].tolist() == [1, 2] and nn[2].tolist() == [0, 1]


def test_morans_constant_raises():
    g = A.knn_graph(np.random.default_rng(11).normal(size=(10, 3)), k=3)
    with pytest.raises(A.ZeroVariance):
        A.morans_i(g, np.full(10, 2.5))


def test_morans_two_clusters_brute_force():
    r = np.random.default_rng(12)
    e = np.vstack([r.normal([5, 0, 0], 0.1, size=(10, 3)), r.normal([0, 5, 0], 0.1, size=(10, 3))])
    x = np.array([1.0] * 10 + [0.0] * 10)
    g = A.knn_graph(e, k=4)
    got = A.morans_i(g, x)
    assert abs(got - brute_morans(x, g.neighbors)) < 1e-10
    assert got > 0.9


def test_morans_permutation_null_mean():
    r = np.random.default_rng(13)
    n = 20
    g = A.knn_graph(r.normal(size=(n, 4)), k=5)
    x = r.normal(size=n)
    null = A.morans_i_permutation_null(g, x, 1000, seed=1)
    assert abs(null.mean() + 1 / (n - 1)) < 3 * null.std() / np.sqrt(len(null))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50).filter(lambda a: abs(a) > 1e-3), st.floats(-1e3, 1e3))
def test_morans_affine_invariance(seed, a, b):
    r = np.random.default_rng(seed)
    g = A.knn_graph(r.normal(size=(25, 3)), k=4)
    x = r.normal(size=25)
    assert abs(A.morans_i(g, x) - A.morans_i(g, a * x + b)) < 1e-10


def test_symmetric_weights_flag():
    g = A.knn_graph(np.random.default_rng(14).normal(size=(15, 2)), k=2, symmetric=True)
    w = g.weights()
    assert np.array_equal(w, w.T) and np.all(np.diag(w) == 0)
    x = np.random.default_rng(15).normal(size=15)
    xc = x - x.mean()
    assert A.morans_i(g, x) == pytest.approx(15 / w.sum() * (xc @ w @ xc) / (xc @ xc), abs=1e-12)


# k-medoids -------------------------------------------------------------------------------------


def exhaustive(d, k):
    return min(d[:, list(c)].min(axis=1).sum() for c in itertools.combinations(range(len(d)), k))


def test_kmedoids_k_equals_n():
    x = np.random.default_rng(16).normal(size=(5, 2))
    res = A.kmedoids(x, 5)
    assert res.cost == 0.0 and res.medoids.tolist() == [0, 1, 2, 3, 4]


def test_kmedoids_six_points_exhaustive():
    x = np.random.default_rng(17).normal(size=(6, 2))
    d = A._pairwise(x)
    assert A.kmedoids(d, 2).cost == pytest.approx(exhaustive(d, 2), abs=1e-12)


def test_kmedoids_duplicate_clusters():
    base = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    x = np.repeat(base, 4, axis=0)
    res = A.kmedoids(x, 3, seed=2, distance=False)
    assert sorted({int(m) // 4 for m in res.medoids}) == [0, 1, 2]
    assert res.cost == 0.0


def test_kmedoids_monotone_and_deterministic():
    x = np.random.default_rng(18).normal(size=(40, 3))
    a = A.kmedoids(x, 4, seed=5, distance=False)
    b = A.kmedoids(x, 4, seed=5, distance=False)
    assert a.medoids.tolist() == b.medoids.tolist()
    assert all(y <= x_ + 1e-12 for x_, y in zip(a.history, a.history[1:]))


def test_kmedoids_k_zero():
    with pytest.raises(ValidationError):
        A.kmedoids(np.eye(3), 0)
