"""Procedural H&E-like nucleus patches with known generative parameters.

Four morphology classes cross two factors: shape (round vs elongated) and
chromatin texture (smooth vs granular).  Size, darkness and orientation are
drawn from the same distributions for every class, so only shape and texture
identify the class.  Patches are composed in stain-concentration space and
rendered through an H&E basis, which lets tests apply controlled stain shifts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import stain

SIZE = 60
CLASS_NAMES = ("round_smooth", "round_granular", "elongated_smooth", "elongated_granular")

DEFAULT_H = np.array([0.65, 0.70, 0.29])
DEFAULT_E = np.array([0.07, 0.99, 0.11])


def default_basis() -> np.ndarray:
    m = np.column_stack([DEFAULT_H, DEFAULT_E])
    return m / np.linalg.norm(m, axis=0)


@dataclass
class SyntheticConfig:
    n: int = 2000
    seed: int = 0
    radius: tuple = (6.5, 9.5)
    round_ratio: tuple = (1.0, 1.15)
    elongated_ratio: tuple = (1.9, 2.5)
    darkness: tuple = (0.55, 0.85)
    granularity: float = 0.7
    clumps: tuple = (6, 12)           # chromatin clump count for granular nuclei
    clump_sigma: float = 1.5
    irregularity: float = 0.06        # contour wobble amplitude per harmonic
    neighbors: tuple = (0, 0)         # partially visible neighbouring nuclei
    neighbor_distance: tuple = (19.0, 26.0)
    noise: float = 0.02


@dataclass
class SyntheticSet:
    images: np.ndarray      # (n, 60, 60, 3) float32 in [0, 1]
    labels: np.ndarray      # (n,) int
    params: np.ndarray      # (n, 6) generative parameters
    conc: np.ndarray        # (n, 2, 60, 60) float32 stain concentrations
    param_names: tuple = ("axis_ratio", "granularity", "radius", "darkness", "angle_cos2", "angle_sin2")

    def render(self, basis: np.ndarray, intensity: float = 1.0) -> np.ndarray:
        """Re-render every patch through another stain basis (a stain shift)."""
        return np.stack([_render(c, basis, intensity) for c in self.conc]).astype(np.float32)


def _render(conc: np.ndarray, basis: np.ndarray, intensity: float = 1.0) -> np.ndarray:
    return stain.render(conc.reshape(2, -1) * intensity, basis, (SIZE, SIZE, 3))


def _ellipse_mask(rng, cx, cy, a, b, theta, irregularity):
    """Soft mask of an ellipse whose contour carries random low-order wobble."""
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    phi = np.arctan2(v / b, u / a)
    wobble = 1.0
    for m in (2, 3, 4, 5):
        wobble = wobble + rng.uniform(0, irregularity) * np.cos(m * phi + rng.uniform(0, 2 * np.pi))
    dist = np.sqrt((u / a) ** 2 + (v / b) ** 2) / wobble
    return 1.0 / (1.0 + np.exp((dist - 1.0) * 12.0))


def _chromatin(rng, inside, granular: bool, cfg: SyntheticConfig):
    if not granular:
        g = gaussian_filter(rng.standard_normal((SIZE, SIZE)), 4.0)
        return 1.0 + 0.08 * g / g.std()
    # coarse clumps: dark blobs of a few pixels on a paler nucleoplasm
    ys, xs = np.nonzero(inside > 0.6)
    if len(ys) == 0:
        return np.ones((SIZE, SIZE))
    k = int(rng.integers(*cfg.clumps, endpoint=True))
    pick = rng.choice(len(ys), size=min(k, len(ys)), replace=False)
    field = np.zeros((SIZE, SIZE))
    field[ys[pick], xs[pick]] = rng.uniform(0.7, 1.3, size=len(pick))
    field = gaussian_filter(field, cfg.clump_sigma)
    field /= field.max()
    tex = (1.0 - cfg.granularity) + 2.0 * cfg.granularity * field
    return tex / tex[inside > 0.5].mean()


def _nucleus(rng, cls: int, cfg: SyntheticConfig):
    elongated, granular = cls // 2, cls % 2
    r = rng.uniform(*cfg.radius)
    ratio = rng.uniform(*(cfg.elongated_ratio if elongated else cfg.round_ratio))
    a, b = r * np.sqrt(ratio), r / np.sqrt(ratio)
    theta = rng.uniform(0, np.pi)
    cy, cx = (SIZE - 1) / 2 + rng.uniform(-1.5, 1.5, size=2)
    inside = _ellipse_mask(rng, cx, cy, a, b, theta, cfg.irregularity)
    dark = rng.uniform(*cfg.darkness)
    tex = _chromatin(rng, inside, bool(granular), cfg)
    h = dark * 1.6 * inside * tex

    # partially visible neighbours at the patch periphery, of any class
    occupied = inside.copy()
    for _ in range(int(rng.integers(*cfg.neighbors, endpoint=True))):
        ang, dist = rng.uniform(0, 2 * np.pi), rng.uniform(*cfg.neighbor_distance)
        ncls = int(rng.integers(4))
        nr = rng.uniform(*cfg.radius)
        nratio = rng.uniform(*(cfg.elongated_ratio if ncls // 2 else cfg.round_ratio))
        m = _ellipse_mask(rng, cx + dist * np.cos(ang), cy + dist * np.sin(ang),
                          nr * np.sqrt(nratio), nr / np.sqrt(nratio), rng.uniform(0, np.pi),
                          cfg.irregularity)
        m = m * (1.0 - occupied)
        h = h + rng.uniform(*cfg.darkness) * 1.6 * m * _chromatin(rng, m, bool(ncls % 2), cfg)
        occupied = np.maximum(occupied, m)
    h = h + 0.05
    bg = gaussian_filter(rng.standard_normal((SIZE, SIZE)), 3.0)
    e = (0.35 + 0.1 * bg / bg.std()) * (1.0 - 0.7 * occupied)
    conc = np.clip(np.stack([h, e]), 0.0, None)
    conc += cfg.noise * rng.standard_normal(conc.shape)
    params = [ratio, cfg.granularity if granular else 0.0, r, dark, np.cos(2 * theta), np.sin(2 * theta)]
    return np.clip(conc, 0.0, None), params


def make_dataset(cfg: SyntheticConfig = SyntheticConfig(), basis=None) -> SyntheticSet:
    basis = default_basis() if basis is None else np.asarray(basis)
    ss = np.random.SeedSequence(cfg.seed)
    labels = np.arange(cfg.n) % 4
    np.random.default_rng(ss.spawn(1)[0]).shuffle(labels)
    children = ss.spawn(cfg.n)
    concs, params = [], []
    for i in range(cfg.n):
        c, p = _nucleus(np.random.default_rng(children[i]), int(labels[i]), cfg)
        concs.append(c.astype(np.float32))
        params.append(p)
    conc = np.stack(concs)
    images = np.stack([_render(c, basis) for c in conc]).astype(np.float32)
    return SyntheticSet(images, labels, np.asarray(params, np.float64), conc)


def shifted_basis(seed: int, magnitude: float = 0.15) -> tuple[np.ndarray, float]:
    """A random held-out stain basis plus a global intensity factor."""
    rng = np.random.default_rng(seed)
    m = default_basis() + rng.uniform(-magnitude, magnitude, size=(3, 2))
    m = np.clip(m, 0.02, None)
    return m / np.linalg.norm(m, axis=0), float(rng.uniform(0.75, 1.25))
