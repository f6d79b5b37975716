"""Macenko stain estimation, reference normalisation and GMM stain-statistics augmentation.

Images are float RGB arrays in [0, 1] with shape (H, W, 3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConvergenceError, FormatError, InputError, ValidationError

OD_OFFSET = 1.0
OD_LEVELS = 256.0


class StainEstimationError(InputError):
    pass


class InsufficientTissue(StainEstimationError):
    pass


class DegenerateStains(StainEstimationError):
    pass


def od_transform(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return -np.log10((255.0 * img + OD_OFFSET) / OD_LEVELS)


def od_inverse(od) -> np.ndarray:
    return (OD_LEVELS * np.power(10.0, -np.asarray(od, dtype=np.float64)) - OD_OFFSET) / 255.0


@dataclass
class StainBasis:
    matrix: np.ndarray  # 3x2, columns H then E
    c99: np.ndarray     # 99th-percentile concentrations (H, E)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 2)
        self.c99 = np.asarray(self.c99, dtype=np.float64).reshape(2)

    def to_text(self) -> str:
        m = self.matrix
        return "\n".join([
            "[stain_basis]",
            "H = " + " ".join(repr(float(v)) for v in m[:, 0]),
            "E = " + " ".join(repr(float(v)) for v in m[:, 1]),
            "c99 = " + " ".join(repr(float(v)) for v in self.c99),
            "",
        ])

    @classmethod
    def from_text(cls, text: str) -> "StainBasis":
        fields = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line or line == "[stain_basis]":
                continue
            if "=" not in line:
                raise FormatError(f"stain basis: malformed line {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                fields[key] = [float(v) for v in val.split()]
            except ValueError:
                raise FormatError(f"stain basis: non-numeric value in {line!r}") from None
        sizes = {"H": 3, "E": 3, "c99": 2}
        for key, n in sizes.items():
            if len(fields.get(key, ())) != n:
                raise FormatError(f"stain basis: field {key!r} needs {n} floats")
        return cls(np.column_stack([fields["H"], fields["E"]]), fields["c99"])


def _tissue_od(img, beta: float, luminosity: float) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValidationError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise ValidationError("RGB values must lie in [0, 1]")
    px = img.reshape(-1, 3)
    od = od_transform(px)
    keep = ~np.all(px > luminosity, axis=1) & (np.linalg.norm(od, axis=1) > beta)
    return od, od[keep]


def estimate_stain_basis(img, beta: float = 0.15, alpha: float = 1.0,
                         luminosity: float = 0.94, min_pixels: int = 200,
                         min_eig_ratio: float = 1e-4) -> StainBasis:
    od_all, od = _tissue_od(img, beta, luminosity)
    if od.shape[0] < min_pixels:
        raise InsufficientTissue(
            f"only {od.shape[0]} stained pixels (need {min_pixels}) above OD threshold {beta}")
    evals, evecs = np.linalg.eigh(np.cov(od.T))
    if evals[2] <= 0 or evals[1] / evals[2] < min_eig_ratio:
        raise DegenerateStains(
            f"optical densities are (nearly) rank 1: eigenvalue ratio {evals[1] / max(evals[2], 1e-300):.2e}")
    plane = evecs[:, [2, 1]].copy()
    if (od @ plane[:, 0]).mean() < 0:
        plane[:, 0] *= -1
    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, alpha), np.percentile(phi, 100 - alpha)
    if hi - lo < 1e-3:
        raise DegenerateStains(f"stain angle spread {hi - lo:.2e} rad is too small")
    vecs = []
    for ang in (lo, hi):
        v = plane @ np.array([math.cos(ang), math.sin(ang)])
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        vecs.append(v / np.linalg.norm(v))
    # hematoxylin absorbs more strongly in the blue OD channel
    h, e = (vecs[0], vecs[1]) if vecs[0][2] >= vecs[1][2] else (vecs[1], vecs[0])
    m = np.column_stack([h, e])
    c = _solve_concentrations(od_all, m)
    return StainBasis(m, np.percentile(c, 99, axis=1))


def _solve_concentrations(od_px: np.ndarray, m: np.ndarray) -> np.ndarray:
    c = np.linalg.pinv(m) @ od_px.T
    return np.clip(c, 0.0, None)


def concentrations(img, basis: StainBasis) -> np.ndarray:
    """(2, n) non-negative stain concentrations of every pixel."""
    img = np.asarray(img, dtype=np.float64)
    return _solve_concentrations(od_transform(img.reshape(-1, 3)), basis.matrix)


def render(conc: np.ndarray, basis_matrix: np.ndarray, shape) -> np.ndarray:
    od = (np.asarray(basis_matrix) @ conc).T
    return np.clip(od_inverse(od), 0.0, 1.0).reshape(shape)


def prepare_reference(img, **kw) -> StainBasis:
    return estimate_stain_basis(img, **kw)


def normalize_to_reference(img, ref: StainBasis, **kw) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    src = estimate_stain_basis(img, **kw)
    if np.any(src.c99 <= 0):
        raise DegenerateStains(f"source 99th-percentile concentrations not positive: {src.c99}")
    c = concentrations(img, src) * (ref.c99 / src.c99)[:, None]
    return render(c, ref.matrix, img.shape)


# GMM stain statistics -----------------------------------------------------


def stain_stats(img) -> np.ndarray:
    """Per-channel OD mean and std (6 values: 3 means then 3 stds)."""
    od = od_transform(np.asarray(img).reshape(-1, 3))
    return np.concatenate([od.mean(axis=0), od.std(axis=0)])


@dataclass
class StainStatsModel:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    log_likelihood: float = float("nan")
    n_iter: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, np.float64)
        self.means = np.asarray(self.means, np.float64)
        self.stds = np.asarray(self.stds, np.float64)
        if abs(self.weights.sum() - 1) > 1e-6 or np.any(self.stds < 0):
            raise ValidationError("GMM weights must sum to 1 and stds be non-negative")

    @property
    def components(self) -> int:
        return len(self.weights)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(self.components, p=self.weights)
        return self.means[k] + self.stds[k] * rng.standard_normal(self.means.shape[1])


def _log_gauss(x, means, variances):
    # (n, k) diagonal-Gaussian log densities
    diff = x[:, None, :] - means[None]
    return -0.5 * (np.log(2 * np.pi * variances)[None] + diff ** 2 / variances[None]).sum(-1)


def gmm_fit(stats, components: int = 1, seed: int = 0, max_iter: int = 500,
            tol: float = 1e-8, var_floor: float = 1e-10) -> StainStatsModel:
    """Diagonal-covariance EM on per-image stain statistics."""
    x = np.asarray(stats, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"stats must be 2-D (images x features), got {x.shape}")
    n, d = x.shape
    if n < 10 * components:
        raise ValidationError(f"need at least {10 * components} images for {components} components, got {n}")
    rng = np.random.default_rng(seed)
    means = x[rng.choice(n, components, replace=False)]
    variances = np.tile(x.var(axis=0) + var_floor, (components, 1))
    weights = np.full(components, 1.0 / components)
    prev = -np.inf
    for it in range(1, max_iter + 1):
        logp = _log_gauss(x, means, variances) + np.log(weights)[None]
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        variances = (resp.T @ x ** 2) / nk[:, None] - means ** 2
        variances = np.maximum(variances, 0.0) + var_floor
        if abs(ll - prev) <= tol * max(1.0, abs(ll)):
            return StainStatsModel(weights / weights.sum(), means, np.sqrt(variances), ll, it)
        prev = ll
    raise ConvergenceError(f"EM did not converge in {max_iter} iterations (log-likelihood {ll:.6g})")


def shift_stats(img, target: np.ndarray) -> np.ndarray:
    """Affinely move each OD channel from the image's own mean/std to ``target``."""
    img = np.asarray(img, dtype=np.float64)
    od = od_transform(img.reshape(-1, 3))
    mu, sd = od.mean(axis=0), od.std(axis=0)
    t_mu, t_sd = np.asarray(target[:3]), np.abs(np.asarray(target[3:]))
    scale = np.where(sd > 0, t_sd / np.where(sd > 0, sd, 1.0), 0.0)
    out = (od - mu) * scale + t_mu
    return np.clip(od_inverse(np.clip(out, 0.0, None)), 0.0, 1.0).reshape(img.shape)


def gmm_sample_augment(img, model: StainStatsModel, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return shift_stats(img, model.sample(rng))
