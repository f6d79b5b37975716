"""Embedding-space analyses: PCA, stain-shift metrics, kNN graphs, Moran's I and k-medoids."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, ValidationError


class ZeroVariance(InputError):
    pass


def l2_rows(x) -> np.ndarray:
    x = np.asarray(x, np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


# PCA ---------------------------------------------------------------------------------


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray          # (d', d), orthonormal rows
    explained_variance: np.ndarray  # (d',), non-increasing

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, scores) -> np.ndarray:
        return np.asarray(scores) @ self.components + self.mean


def pca_fit(x, n_components: int, rank_tol: float = 1e-10) -> PCA:
    x = np.asarray(x, np.float64)
    n, d = x.shape
    if not 1 <= n_components <= d or n_components >= n + 1:
        raise ValidationError(f"need 1 <= n_components <= min(d, n), got {n_components} for {x.shape}")
    mean = x.mean(axis=0)
    u, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    rank = int(np.sum(s > rank_tol * max(s[0] if len(s) else 0.0, 1e-300)))
    if n_components > rank:
        raise ValidationError(f"n_components={n_components} exceeds the data rank {rank}")
    comps = vt[:n_components]
    # sign convention: largest-magnitude loading of each component is positive
    flip = np.sign(comps[np.arange(n_components), np.argmax(np.abs(comps), axis=1)])
    comps = comps * flip[:, None]
    var = s[:n_components] ** 2 / max(n - 1, 1)
    return PCA(mean, comps, var)


# shift metrics -------------------------------------------------------------------------


@dataclass
class ShiftReport:
    names: list
    rmse: np.ndarray
    cosine: np.ndarray
    overlap: np.ndarray
    k: int
    pca_dim: int
    notes: list = field(default_factory=list)

    def summary(self) -> dict:
        return {m: (float(np.mean(v)), float(np.std(v)))
                for m, v in (("rmse", self.rmse), ("cosine", self.cosine), ("overlap", self.overlap))}

    def to_tsv(self) -> str:
        lines = ["reference\trmse\tcosine\toverlap"]
        for i, name in enumerate(self.names):
            lines.append(f"{name}\t{self.rmse[i]:.6f}\t{self.cosine[i]:.6f}\t{self.overlap[i]:.6f}")
        s = self.summary()
        lines.append("mean\t" + "\t".join(f"{s[m][0]:.6f}" for m in ("rmse", "cosine", "overlap")))
        lines.append("sd\t" + "\t".join(f"{s[m][1]:.6f}" for m in ("rmse", "cosine", "overlap")))
        return "\n".join(lines) + "\n"


def knn_indices(x, k: int, chunk: int = 1024) -> np.ndarray:
    """(n, k) Euclidean nearest neighbours excluding self; ties go to the lower index."""
    x = np.asarray(x, np.float64)
    n = x.shape[0]
    if not 0 < k < n:
        raise ValidationError(f"need 0 < k < n, got k={k}, n={n}")
    sq = (x * x).sum(axis=1)
    out = np.empty((n, k), np.int64)
    for s in range(0, n, chunk):
        rows = np.arange(s, min(s + chunk, n))
        d2 = sq[rows, None] + sq[None, :] - 2.0 * (x[rows] @ x.T)
        d2 = np.maximum(d2, 0.0)
        d2[np.arange(len(rows)), rows] = np.inf
        out[rows] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def _overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = a.shape[1]
    return np.array([len(np.intersect1d(ra, rb, assume_unique=True)) / k for ra, rb in zip(a, b)])


def shift_metrics_projected(p_orig, p_shifted: Sequence, k: int = 100, names=None,
                            cross_condition: bool = False) -> ShiftReport:
    """Shift metrics on already-projected coordinates (rows aligned by cell)."""
    p_orig = np.asarray(p_orig, np.float64)
    n = p_orig.shape[0]
    if n <= k:
        raise ValidationError(f"need more cells than k: n={n}, k={k}")
    nn_orig = knn_indices(p_orig, k)
    rmse, cos, ov = [], [], []
    for p in p_shifted:
        p = np.asarray(p, np.float64)
        if p.shape != p_orig.shape:
            raise ValidationError(f"shifted embeddings {p.shape} not aligned with original {p_orig.shape}")
        diff = p - p_orig
        rmse.append(float(np.mean(np.sqrt(np.mean(diff * diff, axis=1)))))
        num = (p * p_orig).sum(axis=1)
        den = np.linalg.norm(p, axis=1) * np.linalg.norm(p_orig, axis=1)
        cos.append(float(np.mean(np.clip(num / np.maximum(den, 1e-300), -1.0, 1.0))))
        if cross_condition:
            # query each shifted cell against the original set
            both = np.vstack([p_orig, p])
            nn = knn_indices(both, k + 1)[n:]
            nn = np.array([[j for j in row if j != i][:k] for i, row in enumerate(nn)])
        else:
            nn = knn_indices(p, k)
        ov.append(float(np.mean(_overlap(nn_orig, nn))))
    names = list(names) if names is not None else [f"ref{i}" for i in range(len(p_shifted))]
    return ShiftReport(names, np.array(rmse), np.array(cos), np.array(ov), k, p_orig.shape[1])


def shift_metrics(e_orig, e_shifted: Sequence, k: int = 100, pca_dim: int = 64, names=None,
                  cross_condition: bool = False) -> ShiftReport:
    """L2-normalise rows, fit PCA on the original condition, project all, then compare."""
    z = l2_rows(e_orig)
    n, d = z.shape
    if n <= k:
        raise ValidationError(f"need more cells than k: n={n}, k={k}")
    dim = min(pca_dim, d, n - 1)
    pca = pca_fit(z, dim)
    rep = shift_metrics_projected(pca.transform(z), [pca.transform(l2_rows(e)) for e in e_shifted],
                                  k, names, cross_condition)
    rep.pca_dim = dim
    if dim != pca_dim:
        rep.notes.append(f"pca_dim reduced from {pca_dim} to {dim}")
    return rep


# kNN graph and Moran's I -----------------------------------------------------------------


@dataclass
class KnnGraph:
    n: int
    k: int
    neighbors: np.ndarray  # (n, k)
    symmetric: bool = False

    def weights(self) -> np.ndarray:
        w = np.zeros((self.n, self.n))
        w[np.repeat(np.arange(self.n), self.k), self.neighbors.reshape(-1)] = 1.0
        if self.symmetric:
            w = np.maximum(w, w.T)
        return w


def knn_graph(e, k: int = 30, symmetric: bool = False) -> KnnGraph:
    z = l2_rows(e)
    return KnnGraph(z.shape[0], k, knn_indices(z, k), symmetric)


def morans_i(graph: KnnGraph, x) -> float:
    x = np.asarray(x, np.float64)
    if x.shape != (graph.n,):
        raise ValidationError(f"value vector length {x.shape} != graph size {graph.n}")
    xc = x - x.mean()
    denom = float((xc * xc).sum())
    if denom <= 1e-300 * max(1.0, float(np.abs(x).max())):
        raise ZeroVariance("Moran's I is undefined for a constant value vector")
    if graph.symmetric:
        w = graph.weights()
        num, wsum = float(xc @ w @ xc), float(w.sum())
    else:
        num = float((xc[:, None] * xc[graph.neighbors]).sum())
        wsum = float(graph.n * graph.k)
    return graph.n / wsum * num / denom


def morans_i_permutation_null(graph: KnnGraph, x, n_perm: int = 1000, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = np.asarray(x, np.float64)
    return np.array([morans_i(graph, rng.permutation(x)) for _ in range(n_perm)])


# k-medoids ---------------------------------------------------------------------------------


@dataclass
class KMedoidsResult:
    medoids: np.ndarray
    cost: float
    labels: np.ndarray
    history: list  # objective after BUILD and after every accepted swap


def _as_distance(d_or_x) -> np.ndarray:
    a = np.asarray(d_or_x, np.float64)
    if a.ndim == 2 and a.shape[0] == a.shape[1] and np.allclose(a, a.T) and np.all(np.diag(a) == 0):
        return a
    return _pairwise(a)


def _swap(dd: np.ndarray, meds: list, max_swaps: int) -> tuple[list, list]:
    """Best-improvement SWAP from ``meds``; returns final medoids and the cost trace."""
    n, k = dd.shape[0], len(meds)
    cost = float(dd[:, meds].min(axis=1).sum())
    history = [cost]
    for _ in range(max_swaps):
        best = (cost, None, None)
        for i in range(k):
            others = dd[:, meds[:i] + meds[i + 1:]].min(axis=1) if k > 1 else np.full(n, np.inf)
            for c in range(n):
                if c in meds:
                    continue
                tc = float(np.minimum(others, dd[:, c]).sum())
                if tc < best[0] - 1e-12:
                    best = (tc, i, c)
        if best[1] is None:
            break
        meds = meds[:best[1]] + [best[2]] + meds[best[1] + 1:]
        cost = best[0]
        history.append(cost)
    return meds, history


def kmedoids(d_or_x, k: int, seed: int = 0, restarts: int = 10, max_swaps: int = 10_000,
             distance: Optional[bool] = None) -> KMedoidsResult:
    """PAM: greedy BUILD then best-improvement SWAP until no swap lowers the cost.

    SWAP is a local search, so it is also run from ``restarts`` seeded random
    medoid sets and the cheapest result is kept.  Ties go to the lowest index
    after a seeded relabelling, so results are deterministic per seed.
    ``distance`` forces interpretation of the input (True: distance matrix,
    False: embeddings); by default a square, symmetric, zero-diagonal array is
    treated as distances.
    """
    if distance is None:
        d = _as_distance(d_or_x)
    elif distance:
        d = np.asarray(d_or_x, np.float64)
    else:
        d = _pairwise(d_or_x)
    n = d.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    dd = d[np.ix_(order, order)]

    meds = [int(np.argmin(dd.sum(axis=0)))]
    while len(meds) < k:
        near = dd[:, meds].min(axis=1)
        gains = np.array([np.maximum(near - dd[:, c], 0).sum() if c not in meds else -1.0
                          for c in range(n)])
        meds.append(int(np.argmax(gains)))
    best_meds, history = _swap(dd, meds, max_swaps)
    for _ in range(restarts):
        start = sorted(int(i) for i in rng.choice(n, k, replace=False))
        m, h = _swap(dd, start, max_swaps)
        if h[-1] < history[-1] - 1e-12:
            best_meds, history = m, h
    medoids = np.sort(order[best_meds])
    labels = np.argmin(d[:, medoids], axis=1)
    return KMedoidsResult(medoids, float(d[:, medoids].min(axis=1).sum()), labels, history)


def _pairwise(x) -> np.ndarray:
    x = np.asarray(x, np.float64)
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(-1))
