"""Linear probes on frozen embeddings: logistic classification and ridge regression."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize
from sklearn import metrics as skm
from sklearn.model_selection import LeaveOneGroupOut, StratifiedKFold

from .errors import SingularSystemError, ValidationError

L2_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)


class ProbeWarning(UserWarning):
    pass


# standardisation ------------------------------------------------------------------


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x) -> "Scaler":
        x = np.asarray(x, np.float64)
        sd = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, np.float64) - self.mean) / self.std


# logistic regression ----------------------------------------------------------------


@dataclass
class LogisticModel:
    weights: np.ndarray  # (d, C)
    bias: np.ndarray     # (C,)
    classes: np.ndarray
    n_iter: int
    converged: bool
    grad_norm: float

    def scores(self, x) -> np.ndarray:
        z = np.asarray(x, np.float64) @ self.weights + self.bias
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        return self.classes[np.argmax(self.scores(x), axis=1)]


def _logistic_objective(w, b, x, onehot, l2):
    z = x @ w + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = -(onehot * logp).sum() / n + 0.5 * l2 * (w * w).sum()
    resid = (np.exp(logp) - onehot) / n
    return loss, x.T @ resid + l2 * w, resid.sum(axis=0)


def logistic_fit(x, y, l2: float = 1.0, max_iter: int = 2000, tol: float = 1e-6) -> LogisticModel:
    """Multinomial logistic regression with an L2 penalty on the weights (not the bias).

    Solved with L-BFGS from a zero start.
    """
    x = np.asarray(x, np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValidationError(f"X {x.shape} and y {y.shape} disagree")
    if l2 < 0:
        raise ValidationError(f"l2 must be non-negative, got {l2}")
    classes, yi = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValidationError(f"training data contain a single class ({classes.tolist()})")
    onehot = np.eye(len(classes))[yi]
    d, k = x.shape[1], len(classes)

    def fun(theta):
        w, b = theta[:d * k].reshape(d, k), theta[d * k:]
        loss, gw, gb = _logistic_objective(w, b, x, onehot, l2)
        return loss, np.concatenate([gw.ravel(), gb])

    res = optimize.minimize(fun, np.zeros(d * k + k), jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0})
    w, b = res.x[:d * k].reshape(d, k), res.x[d * k:]
    gnorm = float(np.linalg.norm(fun(res.x)[1]))
    it = int(res.nit)
    converged = gnorm < tol or bool(res.success)
    if not converged:
        warnings.warn(f"logistic_fit stopped after {it} iterations with gradient norm {gnorm:.2e}",
                      ProbeWarning, stacklevel=2)
    return LogisticModel(w, b, classes, it, converged, gnorm)


# ridge ---------------------------------------------------------------------------------


def ridge_fit(x, y, lam: float) -> np.ndarray:
    """W = (X^T X + lam I)^-1 X^T Y by a linear solve."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if lam < 0:
        raise ValidationError(f"ridge lambda must be >= 0, got {lam}")
    if x.shape[0] != y.shape[0]:
        raise ValidationError(f"X has {x.shape[0]} rows but Y has {y.shape[0]}")
    a = x.T @ x + lam * np.eye(x.shape[1])
    if lam == 0 and np.linalg.matrix_rank(x) < x.shape[1]:
        raise SingularSystemError(f"X^T X is singular (rank {np.linalg.matrix_rank(x)} < {x.shape[1]}) with lambda=0")
    try:
        return np.linalg.solve(a, x.T @ y)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"ridge system is singular: {exc}") from None


# metrics ---------------------------------------------------------------------------------


def classification_metrics(y_true, y_pred, y_score, classes=None) -> dict:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    y_score = np.asarray(y_score, np.float64)
    if not (len(y_true) == len(y_pred) == len(y_score)):
        raise ValidationError("y_true, y_pred and y_score lengths differ")
    classes = np.unique(np.concatenate([y_true, y_pred])) if classes is None else np.asarray(classes)
    if y_score.ndim != 2 or y_score.shape[1] != len(classes):
        raise ValidationError(f"y_score needs one column per class ({len(classes)}), got {y_score.shape}")
    present = np.isin(classes, y_true)
    if not present.all():
        warnings.warn(f"classes {classes[~present].tolist()} absent from y_true; excluded from AUC/AUPR",
                      ProbeWarning, stacklevel=2)
    aucs, auprs = [], []
    for j, c in enumerate(classes):
        pos = y_true == c
        if not pos.any() or pos.all():
            continue
        aucs.append(skm.roc_auc_score(pos, y_score[:, j]))
        auprs.append(skm.average_precision_score(pos, y_score[:, j]))
    labels = classes[present]
    recalls = [np.mean(y_pred[y_true == c] == c) for c in labels]
    return {
        "balanced_accuracy": float(np.mean(recalls)),
        "auc": float(np.mean(aucs)) if aucs else float("nan"),
        "aupr": float(np.mean(auprs)) if auprs else float("nan"),
        "f1_macro": float(skm.f1_score(y_true, y_pred, labels=labels, average="macro", zero_division=0)),
        "f1_weighted": float(skm.f1_score(y_true, y_pred, labels=labels, average="weighted", zero_division=0)),
    }


def pcc(y_true, y_pred) -> np.ndarray:
    """Per-column Pearson correlation; NaN where either column has zero variance."""
    a = np.asarray(y_true, np.float64)
    b = np.asarray(y_pred, np.float64)
    one_d = a.ndim == 1
    a, b = a.reshape(len(a), -1), b.reshape(len(b), -1)
    if a.shape != b.shape:
        raise ValidationError(f"pcc shapes differ: {a.shape} vs {b.shape}")
    da, db = a - a.mean(axis=0), b - b.mean(axis=0)
    num = (da * db).sum(axis=0)
    den = np.sqrt((da * da).sum(axis=0) * (db * db).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    r = np.clip(r, -1.0, 1.0)
    return r[0] if one_d else r


# gene selection and subsampling -------------------------------------------------------------


def select_target_genes(slides: list, gene_ids, top: int = 50) -> list:
    """Rank genes by summed within-slide rank of mean expression; ties by gene id.

    ``slides`` is a list of (cells, genes) count matrices sharing ``gene_ids``.
    """
    gene_ids = [str(g) for g in gene_ids]
    if not slides:
        raise ValidationError("select_target_genes needs at least one slide")
    g = len(gene_ids)
    if g < top:
        warnings.warn(f"only {g} genes available, fewer than the requested {top}", ProbeWarning, stacklevel=2)
    total = np.zeros(g)
    for counts in slides:
        counts = np.asarray(counts, np.float64)
        if counts.shape[1] != g:
            raise ValidationError(f"slide has {counts.shape[1]} genes, expected {g}")
        means = counts.mean(axis=0)
        # rank 0 = highest mean; equal means share the same (minimum) rank
        order = np.argsort(-means, kind="stable")
        ranks = np.empty(g)
        ranks[order] = np.arange(g)
        for val in np.unique(means):
            tie = means == val
            ranks[tie] = ranks[tie].min()
        total += ranks
    idx = sorted(range(g), key=lambda i: (total[i], gene_ids[i]))
    return [gene_ids[i] for i in idx[:top]]


def subsample_cells(n_cells: int, n: int = 10_000, seed: int = 0, slide: str = "") -> np.ndarray:
    if n_cells <= n:
        return np.arange(n_cells)
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + list(str(slide).encode())
    rng = np.random.default_rng(np.random.SeedSequence(key))
    return np.sort(rng.choice(n_cells, n, replace=False))


# splits -------------------------------------------------------------------------------------


def stratified_kfold(y, k: int = 5, seed: int = 0) -> list:
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    small = classes[counts < k]
    if len(small):
        raise ValidationError(f"class {small[0]!r} has {counts[counts < k][0]} members, fewer than k={k}")
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [(tr, te) for tr, te in skf.split(np.zeros(len(y)), y)]


def leave_one_slide_out(groups) -> list:
    groups = np.asarray(groups)
    if groups.size == 0:
        raise ValidationError("leave-one-slide-out needs slide ids")
    logo = LeaveOneGroupOut()
    return [(tr, te) for tr, te in logo.split(np.zeros(len(groups)), groups=groups)]


# probing tasks --------------------------------------------------------------------------------


@dataclass
class ProbeReport:
    kind: str
    folds: list = field(default_factory=list)   # one metric dict per fold
    notes: list = field(default_factory=list)

    def summary(self) -> dict:
        keys = [k for k in self.folds[0] if isinstance(self.folds[0][k], float)]
        out = {}
        for k in keys:
            vals = np.array([f[k] for f in self.folds], np.float64)
            out[k] = (float(np.nanmean(vals)), float(np.nanstd(vals)))
        return out

    def to_tsv(self) -> str:
        summ = self.summary()
        keys = list(summ)
        lines = ["fold\t" + "\t".join(keys)]
        for i, f in enumerate(self.folds):
            lines.append(f"{i}\t" + "\t".join(f"{f[k]:.6f}" for k in keys))
        lines.append("mean\t" + "\t".join(f"{summ[k][0]:.6f}" for k in keys))
        lines.append("sd\t" + "\t".join(f"{summ[k][1]:.6f}" for k in keys))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        summ = self.summary()
        head = " | ".join(f"{k:>18}" for k in summ)
        body = " | ".join(f"{m:.3f} ({s:.3f})".rjust(18) for m, s in summ.values())
        return head + "\n" + body + "\n"


def _select_l2(x, y, grid, seed) -> float:
    """Pick l2 by balanced accuracy on one stratified inner split (ties: first in grid)."""
    classes, counts = np.unique(y, return_counts=True)
    k = int(min(5, counts.min()))
    if len(grid) == 1 or k < 2:
        return float(grid[0])
    tr, va = stratified_kfold(y, k, seed)[0]
    best, best_l2 = -1.0, float(grid[0])
    for l2 in grid:
        sc = Scaler.fit(x[tr])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ProbeWarning)
            model = logistic_fit(sc.transform(x[tr]), y[tr], l2)
        pred = model.predict(sc.transform(x[va]))
        ba = np.mean([np.mean(pred[y[va] == c] == c) for c in np.unique(y[va])])
        if ba > best + 1e-12:
            best, best_l2 = ba, float(l2)
    return best_l2


def probe_classification(emb, labels, folds, l2_grid=L2_GRID, seed: int = 0,
                         max_iter: int = 2000) -> ProbeReport:
    x = np.asarray(emb, np.float64)
    y = np.asarray(labels)
    if x.shape[0] != y.shape[0]:
        raise ValidationError(f"{x.shape[0]} embeddings but {y.shape[0]} labels")
    report = ProbeReport("classification")
    all_classes = np.unique(y)
    for i, (tr, te) in enumerate(folds):
        missing = np.setdiff1d(all_classes, y[tr])
        if len(missing):
            raise ValidationError(f"fold {i}: training split lacks classes {missing.tolist()}")
        l2 = _select_l2(x[tr], y[tr], l2_grid, seed + i)
        sc = Scaler.fit(x[tr])
        model = logistic_fit(sc.transform(x[tr]), y[tr], l2, max_iter=max_iter)
        xt = sc.transform(x[te])
        m = classification_metrics(y[te], model.predict(xt), model.scores(xt), classes=model.classes)
        m["l2"] = l2
        report.folds.append(m)
    return report


def probe_regression(emb, targets, folds, lam: float = 1.0, genes_first: bool = True) -> ProbeReport:
    """Ridge probe with per-gene PCC.

    ``genes_first``: average PCC over genes within each fold, then over folds.
    Otherwise each gene's PCC is averaged over folds first; the fold rows then
    hold per-fold means for reference only.
    """
    x = np.asarray(emb, np.float64)
    y = np.log1p(np.asarray(targets, np.float64))
    report = ProbeReport("regression")
    per_fold = []
    for tr, te in folds:
        sx, sy = Scaler.fit(x[tr]), Scaler.fit(y[tr])
        xtr = np.hstack([sx.transform(x[tr]), np.ones((len(tr), 1))])
        w = ridge_fit(xtr, sy.transform(y[tr]), lam)
        pred = np.hstack([sx.transform(x[te]), np.ones((len(te), 1))]) @ w
        r = pcc(sy.transform(y[te]), pred)
        r = np.atleast_1d(r)
        per_fold.append(r)
        bad = int(np.isnan(r).sum())
        if bad:
            report.notes.append(f"{bad} gene(s) with zero variance excluded from the mean")
        report.folds.append({"pcc_mean": float(np.nanmean(r)) if bad < len(r) else float("nan")})
    if not genes_first:
        gene_means = np.nanmean(np.stack(per_fold), axis=0)
        report.notes.append(f"gene-first-over-folds mean PCC {float(np.nanmean(gene_means)):.6f}")
    return report
