"""Seedable augmentation policies for nucleus patches.

Sources are 60x60x3 float patches centred on the nucleus; every policy
returns a 40x40x3 view.  A view is a pure function of (policy, source, seed).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import stain as stain_mod
from .errors import ConfigError, ValidationError

OUT_SIZE = 40
SOURCE_SIZE = 60
MIN_ROTATION_SOURCE = math.ceil(OUT_SIZE * math.sqrt(2))  # 57

TRANSFORMS = (
    "rotate_crop", "center_crop", "random_resized_crop", "hflip", "stain_gmm",
    "color_jitter", "grayscale", "random_erasing", "gaussian_blur",
)


@dataclass
class TransformSpec:
    name: str
    p: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.name!r}; known: {', '.join(TRANSFORMS)}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"{self.name}: probability {self.p} outside [0, 1]")


@dataclass
class AugPolicy:
    name: str
    transforms: list

    def __post_init__(self):
        names = [t.name for t in self.transforms]
        if "rotate_crop" in names and "center_crop" in names:
            raise ConfigError("a policy uses either rotate_crop or center_crop, not both")
        if names and names[0] not in ("rotate_crop", "center_crop"):
            raise ConfigError("the first transform must reduce the 60x60 source (rotate_crop or center_crop)")

    def to_dict(self) -> dict:
        return {"name": self.name,
                "transforms": [{"name": t.name, "p": t.p, **t.params} for t in self.transforms]}

    @classmethod
    def from_dict(cls, d: dict) -> "AugPolicy":
        if not isinstance(d, dict) or "transforms" not in d:
            raise ConfigError("policy document needs a 'transforms' list")
        specs = []
        for item in d["transforms"]:
            item = dict(item)
            name = item.pop("name", None)
            p = float(item.pop("p", 1.0))
            specs.append(TransformSpec(name, p, item))
        return cls(str(d.get("name", "custom")), specs)

    def uses(self, name: str) -> bool:
        return any(t.name == name and t.p > 0 for t in self.transforms)


def _a1_core(jitter=(0.6, 0.7, 0.5, 0.2)) -> list:
    return [
        TransformSpec("rotate_crop", 1.0, {"degrees": [0.0, 360.0]}),
        TransformSpec("random_resized_crop", 1.0, {"scale": [0.32, 1.0], "ratio": [3 / 4, 4 / 3]}),
        TransformSpec("hflip", 0.5),
        TransformSpec("color_jitter", 0.8, {"brightness": jitter[0], "contrast": jitter[1],
                                            "saturation": jitter[2], "hue": jitter[3]}),
        TransformSpec("grayscale", 0.2),
        TransformSpec("random_erasing", 0.3, {"scale": [0.1, 0.3], "ratio": [0.8, 1.2],
                                              "fill": [0.5, 0.5, 0.5]}),
        TransformSpec("gaussian_blur", 1.0, {"sigma": [0.1, 2.0]}),
    ]


def _with_gmm(components: int) -> list:
    ts = _a1_core()
    # stain perturbation models slide preparation, so it precedes scanner-like jitter
    ts.insert(3, TransformSpec("stain_gmm", 1.0, {"components": components}))
    return ts


def _a1_gray() -> list:
    # grayscale stays a single p=0.2 transform; stacking a second copy is not modelled
    return _a1_core()


NOCOLOR_SUFFIX = "-nocolor"


def builtin_policies() -> dict:
    return {
        "a0": AugPolicy("a0", [
            TransformSpec("center_crop", 1.0),
            TransformSpec("random_resized_crop", 1.0, {"scale": [0.08, 1.0], "ratio": [3 / 4, 4 / 3]}),
            TransformSpec("hflip", 0.5),
            TransformSpec("color_jitter", 0.8, {"brightness": 0.4, "contrast": 0.4,
                                                "saturation": 0.2, "hue": 0.1}),
            TransformSpec("grayscale", 0.2),
            TransformSpec("gaussian_blur", 1.0, {"sigma": [0.1, 2.0]}),
        ]),
        "a1": AugPolicy("a1", _a1_core()),
        "a1+gray": AugPolicy("a1+gray", _a1_gray()),
        "a1+gmm1": AugPolicy("a1+gmm1", _with_gmm(1)),
        "a1+gmm10": AugPolicy("a1+gmm10", _with_gmm(10)),
    }


def get_policy(name_or_path) -> AugPolicy:
    presets = builtin_policies()
    if str(name_or_path) in presets:
        return presets[str(name_or_path)]
    base = str(name_or_path).removesuffix(NOCOLOR_SUFFIX)
    if base != str(name_or_path) and base in presets:
        return without_color(presets[base])
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"unknown policy {name_or_path!r}; built-ins: {', '.join(presets)}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"policy file {path}: {exc}") from None
    return AugPolicy.from_dict(doc)


def without_color(policy: AugPolicy) -> AugPolicy:
    """Same geometry, all colour transforms (jitter, grayscale, stain) removed."""
    kept = [copy.deepcopy(t) for t in policy.transforms
            if t.name not in ("color_jitter", "grayscale", "stain_gmm")]
    return AugPolicy(policy.name + NOCOLOR_SUFFIX, kept)


# sampling primitives --------------------------------------------------------


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W, C) at fractional coordinates; reads only the 4 neighbours."""
    h, w = img.shape[:2]
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    if r0.min() < 0 or c0.min() < 0 or r0.max() > h - 1 or c0.max() > w - 1:
        raise ValidationError("bilinear sampling outside the source image")
    top = img[r0, c0] * (1 - fc)
    top = np.where(fc > 0, top + img[r0, c1] * fc, top)
    bot = img[r1, c0] * (1 - fc)
    bot = np.where(fc > 0, bot + img[r1, c1] * fc, bot)
    out = top * (1 - fr)
    return np.where(fr > 0, out + bot * fr, out)


def _snap(x: float) -> float:
    r = round(x)
    return float(r) if abs(x - r) < 1e-12 else x


def rotate_crop(src, angle: float, out_size: int = OUT_SIZE) -> np.ndarray:
    """Bilinear rotation (counter-clockwise, degrees) about the centre, then a central crop."""
    src = np.asarray(src)
    s = src.shape[0]
    if src.ndim != 3 or src.shape[1] != s or s < MIN_ROTATION_SOURCE:
        raise ValidationError(
            f"rotation needs a square source of at least {MIN_ROTATION_SOURCE}px, got {src.shape}")
    theta = math.radians(angle % 360.0)
    c, sn = _snap(math.cos(theta)), _snap(math.sin(theta))
    off = np.arange(out_size) - (out_size - 1) / 2.0
    u, v = np.meshgrid(off, off, indexing="ij")
    centre = (s - 1) / 2.0
    rows = centre + c * u + sn * v
    cols = centre - sn * u + c * v
    return _bilinear(src, rows, cols)


def center_crop(src, out_size: int = OUT_SIZE) -> np.ndarray:
    src = np.asarray(src)
    s = src.shape[0]
    if s < out_size:
        raise ValidationError(f"source {src.shape} smaller than crop {out_size}")
    o = (s - out_size) // 2
    return src[o:o + out_size, o:o + out_size].copy()


def resize_region(img, top: int, left: int, h: int, w: int, out_size: int = OUT_SIZE) -> np.ndarray:
    """Crop the box and resize it to ``out_size`` with bilinear sampling (half-pixel centres)."""
    if h == out_size and w == out_size:
        return img[top:top + h, left:left + w].copy()
    rows = top + np.clip((np.arange(out_size) + 0.5) * h / out_size - 0.5, 0, h - 1)
    cols = left + np.clip((np.arange(out_size) + 0.5) * w / out_size - 0.5, 0, w - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return _bilinear(img, rr, cc)


def sample_resized_crop(rng, size: int, scale, ratio) -> tuple[int, int, int, int]:
    area = size * size
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        ar = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * ar)))
        h = int(round(math.sqrt(target / ar)))
        if 0 < w <= size and 0 < h <= size:
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            return top, left, h, w
    # fallback: whole image clipped to the ratio range
    in_ratio = 1.0
    if in_ratio < ratio[0]:
        w, h = size, int(round(size / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = size, int(round(size * ratio[1]))
    else:
        w = h = size
    return (size - h) // 2, (size - w) // 2, h, w


def grayscale(img) -> np.ndarray:
    lum = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return np.repeat(lum[..., None], 3, axis=-1)


def _rgb_to_hsv(img):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return h, s, v


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def adjust_hue(img, shift: float) -> np.ndarray:
    h, s, v = _rgb_to_hsv(img)
    return _hsv_to_rgb((h + shift) % 1.0, s, v)


def _blend(a, b, factor):
    return np.clip(factor * a + (1 - factor) * b, 0.0, 1.0)


def color_jitter(img, rng, brightness, contrast, saturation, hue) -> tuple[np.ndarray, dict]:
    factors = {
        "brightness": rng.uniform(max(0.0, 1 - brightness), 1 + brightness),
        "contrast": rng.uniform(max(0.0, 1 - contrast), 1 + contrast),
        "saturation": rng.uniform(max(0.0, 1 - saturation), 1 + saturation),
        "hue": rng.uniform(-hue, hue),
    }
    order = rng.permutation(4)
    for k in order:
        if k == 0:
            img = np.clip(img * factors["brightness"], 0.0, 1.0)
        elif k == 1:
            img = _blend(img, grayscale(img)[..., :1].mean(), factors["contrast"])
        elif k == 2:
            img = _blend(img, grayscale(img), factors["saturation"])
        else:
            img = np.clip(adjust_hue(img, factors["hue"]), 0.0, 1.0)
    return img, {**factors, "order": order.tolist()}


def sample_erasing_box(rng, size: int, scale, ratio):
    area = size * size
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        ar = math.exp(rng.uniform(*log_ratio))
        h = int(round(math.sqrt(target * ar)))
        w = int(round(math.sqrt(target / ar)))
        if not (0 < h < size and 0 < w < size):
            continue
        # realised integer box must honour the declared ranges
        if not (scale[0] <= h * w / area <= scale[1] and ratio[0] <= h / w <= ratio[1]):
            continue
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        return top, left, h, w
    return None


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(2 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        for i, wgt in enumerate(k):
            sl = [slice(None)] * 3
            sl[axis] = slice(i, i + out.shape[axis])
            acc += wgt * padded[tuple(sl)]
        out = acc
    return out


# policy application ----------------------------------------------------------


def sample_rng(global_seed: int, sample_id: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(global_seed) & 0xFFFFFFFFFFFFFFFF,
                                                         int(sample_id), int(epoch)]))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _check_source(src) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 3 or src.shape[-1] != 3 or src.shape[0] != src.shape[1]:
        raise ValidationError(f"source patch must be square RGB, got {src.shape}")
    return src


def apply_policy(policy: AugPolicy, src, seed, stain_model: Optional[stain_mod.StainStatsModel] = None,
                 trace: Optional[list] = None) -> np.ndarray:
    """One augmented 40x40 view.  If ``trace`` is a list, applied transforms are appended to it."""
    src = _check_source(src)
    rng = _as_rng(seed)
    img = src
    for t in policy.transforms:
        # one uniform draw per transform keeps the stream layout fixed
        fire = rng.random() < t.p
        if not fire:
            if t.name in ("rotate_crop", "center_crop"):
                img = center_crop(img)
            continue
        p = t.params
        info: dict = {}
        if t.name == "rotate_crop":
            lo, hi = p.get("degrees", [0.0, 360.0])
            angle = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
            img = rotate_crop(img, angle)
            info["angle"] = angle
        elif t.name == "center_crop":
            img = center_crop(img)
        elif t.name == "random_resized_crop":
            box = sample_resized_crop(rng, img.shape[0], p.get("scale", [0.08, 1.0]),
                                      p.get("ratio", [3 / 4, 4 / 3]))
            img = resize_region(img, *box)
            info["box"] = box
        elif t.name == "hflip":
            img = img[:, ::-1].copy()
        elif t.name == "stain_gmm":
            if stain_model is None:
                raise ConfigError(f"policy {policy.name!r} needs a fitted stain model (stain_gmm)")
            img = stain_mod.gmm_sample_augment(img, stain_model, rng)
        elif t.name == "color_jitter":
            img, info = color_jitter(img, rng, p.get("brightness", 0.0), p.get("contrast", 0.0),
                                     p.get("saturation", 0.0), p.get("hue", 0.0))
        elif t.name == "grayscale":
            img = grayscale(img)
        elif t.name == "random_erasing":
            box = sample_erasing_box(rng, img.shape[0], p.get("scale", [0.1, 0.3]),
                                     p.get("ratio", [0.8, 1.2]))
            if box is not None:
                top, left, h, w = box
                img = img.copy()
                img[top:top + h, left:left + w] = np.asarray(p.get("fill", [0.5, 0.5, 0.5]))
            info["box"] = box
        elif t.name == "gaussian_blur":
            lo, hi = p.get("sigma", [0.1, 2.0])
            sigma = float(rng.uniform(lo, hi))
            img = gaussian_blur(img, sigma)
            info["sigma"] = sigma
        if trace is not None:
            trace.append((t.name, info))
    if img.shape[:2] != (OUT_SIZE, OUT_SIZE):
        raise ConfigError(f"policy {policy.name!r} produced {img.shape[:2]}, expected 40x40")
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def two_views(policy: AugPolicy, src, seed, stain_model=None) -> tuple[np.ndarray, np.ndarray]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(
        int(seed) & 0xFFFFFFFFFFFFFFFF)
    sq, sk = ss.spawn(2)
    return (apply_policy(policy, src, np.random.default_rng(sq), stain_model),
            apply_policy(policy, src, np.random.default_rng(sk), stain_model))


def fit_stain_model(sources, components: int, seed: int = 0) -> stain_mod.StainStatsModel:
    """Fit the stain-statistics GMM on the central 40x40 crops of training sources."""
    stats = np.array([stain_mod.stain_stats(center_crop(np.asarray(s))) for s in sources])
    return stain_mod.gmm_fit(stats, components=components, seed=seed)
