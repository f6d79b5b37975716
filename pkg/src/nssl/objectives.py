"""SSL objectives: InfoNCE, DINO image-level matching, iBOT, KoLeo and vMF-KDE.

Teacher-side inputs are always read through ``.data`` so no gradient can
reach them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import arraycore as ac
from .arraycore import Tensor
from .errors import ValidationError

KOLEO_EPS = 1e-8


@dataclass
class DistillParams:
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    teacher_temp_final: float = 0.07
    teacher_temp_warmup: int = 0
    center_momentum: float = 0.9
    prototypes: int = 4096
    center: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.teacher_temp > 0 or self.student_temp < self.teacher_temp:
            raise ValidationError(
                f"need student_temp >= teacher_temp > 0, got {self.student_temp}, {self.teacher_temp}")
        if not 0 <= self.center_momentum < 1:
            raise ValidationError(f"center_momentum must lie in [0, 1), got {self.center_momentum}")
        if self.prototypes < 2:
            raise ValidationError(f"need at least 2 prototypes, got {self.prototypes}")
        if self.center is None:
            self.center = np.zeros(self.prototypes, np.float32)
        self.center = np.asarray(self.center, np.float32)
        if not np.all(np.isfinite(self.center)):
            raise ValidationError("center must be finite")

    def teacher_temp_at(self, step: int) -> float:
        if step >= self.teacher_temp_warmup or self.teacher_temp_warmup == 0:
            return self.teacher_temp_final
        frac = step / self.teacher_temp_warmup
        return self.teacher_temp + frac * (self.teacher_temp_final - self.teacher_temp)


@dataclass
class LossWeights:
    ibot: float = 1.0
    regularizer_weight: float = 0.05
    regularizer: str = "kde"
    kde_kappa: float = 5.0
    local_to_global: bool = False

    def __post_init__(self):
        if self.ibot < 0 or self.regularizer_weight < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.regularizer not in ("kde", "koleo", "none"):
            raise ValidationError(f"unknown regularizer {self.regularizer!r}")
        if self.kde_kappa <= 0:
            raise ValidationError(f"kde_kappa must be positive, got {self.kde_kappa}")


@dataclass
class ObjectivePreset:
    name: str
    kind: str  # "contrastive" or "distillation"
    temperature: float = 0.2
    weights: LossWeights = field(default_factory=LossWeights)


PRESETS = {
    "mocov3": ObjectivePreset("mocov3", "contrastive", temperature=0.2),
    # DINOv2 as published: local-to-global term on, KoLeo regulariser
    "dinov2": ObjectivePreset("dinov2", "distillation", weights=LossWeights(
        ibot=1.0, regularizer_weight=0.1, regularizer="koleo", local_to_global=True)),
    "dinov2_nolocal": ObjectivePreset("dinov2_nolocal", "distillation", weights=LossWeights(
        ibot=1.0, regularizer_weight=0.1, regularizer="koleo", local_to_global=False)),
    # local-to-global removed, KoLeo replaced by vMF-KDE (kappa 5, weight 0.05)
    "dinov2_variant": ObjectivePreset("dinov2_variant", "distillation", weights=LossWeights(
        ibot=1.0, regularizer_weight=0.05, regularizer="kde", kde_kappa=5.0, local_to_global=False)),
}


def objective_preset(name: str) -> ObjectivePreset:
    try:
        return dataclasses.replace(PRESETS[name])
    except KeyError:
        raise ValidationError(f"unknown objective preset {name!r}; choose from {sorted(PRESETS)}") from None


# contrastive --------------------------------------------------------------


def info_nce(q, k_pos, k_neg=None, tau: float = 0.2) -> Tensor:
    """Mean InfoNCE over queries with cosine similarity.

    ``k_neg`` of shape (n, N, d) gives explicit per-query negatives; when it is
    None the other rows of ``k_pos`` serve as negatives (in-batch mode).
    """
    q, k_pos = ac.as_tensor(q), ac.as_tensor(k_pos)
    if q.shape[0] == 0:
        raise ValidationError("info_nce: empty query batch")
    if tau <= 0:
        raise ValidationError(f"info_nce: temperature must be positive, got {tau}")
    if q.shape != k_pos.shape:
        raise ac.ShapeError(f"info_nce: query shape {q.shape} != positive-key shape {k_pos.shape}")
    qn, kn = ac.l2_normalize(q), ac.l2_normalize(k_pos)
    n = q.shape[0]
    if k_neg is None:
        logits = ac.matmul(qn, ac.transpose(kn)) * (1.0 / tau)
        pos = logits[np.arange(n), np.arange(n)]
    else:
        k_neg = ac.as_tensor(k_neg)
        if k_neg.ndim != 3 or k_neg.shape[0] != n or k_neg.shape[2] != q.shape[1]:
            raise ac.ShapeError(f"info_nce: negatives shape {k_neg.shape} incompatible with {q.shape}")
        pos = ac.sum_(qn * kn, axis=-1, keepdims=True) * (1.0 / tau)
        if k_neg.shape[1]:
            negs = ac.matmul(ac.reshape(qn, (n, 1, -1)), ac.swapaxes(ac.l2_normalize(k_neg), 1, 2))
            logits = ac.concat([pos, ac.reshape(negs, (n, -1)) * (1.0 / tau)], axis=1)
        else:
            logits = pos
        pos = ac.reshape(pos, (n,))
    return ac.mean(ac.logsumexp(logits, axis=1) - pos)


# self-distillation --------------------------------------------------------


def teacher_probs(teacher_logits, params: DistillParams, temp: Optional[float] = None) -> np.ndarray:
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits,
                   dtype=np.float64)
    x = (t - params.center.astype(np.float64)) / (temp or params.teacher_temp)
    x -= x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _check_k(logits: Tensor, params: DistillParams) -> None:
    if logits.shape[-1] < 2:
        raise ValidationError(f"need K >= 2 prototypes, got {logits.shape[-1]}")
    if params.center.shape[-1] != logits.shape[-1]:
        raise ac.ShapeError(f"center length {params.center.shape} != K {logits.shape[-1]}")


def dino_global(student_logits, teacher_logits, params: DistillParams,
                teacher_temp: Optional[float] = None) -> Tensor:
    """Cross-view CE between student (V, B, K) and teacher (V, B, K) global views.

    Averaged over ordered view pairs v != v' and over images.
    """
    s = ac.as_tensor(student_logits)
    _check_k(s, params)
    pt = teacher_probs(teacher_logits, params, teacher_temp)
    v = s.shape[0]
    if v < 2 or pt.shape != s.shape:
        raise ac.ShapeError(f"dino_global needs >= 2 matching views, got {s.shape} vs {pt.shape}")
    logp = ac.log_softmax(s, axis=-1, temperature=params.student_temp)
    terms = []
    for a in range(v):
        for b in range(v):
            if a != b:
                terms.append(-ac.sum_(logp[a] * Tensor(pt[b], dtype=logp.data.dtype), axis=-1))
    return ac.mean(ac.stack(terms, axis=0))


def dino_local_global(student_local_logits, teacher_global_logits, params: DistillParams,
                      teacher_temp: Optional[float] = None) -> Tensor:
    s = ac.as_tensor(student_local_logits)
    if s.shape[0] == 0:
        raise ValidationError("dino_local_global: no local views (skip the term instead)")
    _check_k(s, params)
    pt = teacher_probs(teacher_global_logits, params, teacher_temp)
    if pt.shape[0] == 0:
        raise ValidationError("dino_local_global: no global views")
    logp = ac.log_softmax(s, axis=-1, temperature=params.student_temp)
    terms = [-ac.sum_(logp[l] * Tensor(pt[g], dtype=logp.data.dtype), axis=-1)
             for l in range(s.shape[0]) for g in range(pt.shape[0])]
    return ac.mean(ac.stack(terms, axis=0))


def _mask_indices(mask, b: int, n: int):
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (b, n):
            raise ac.ShapeError(f"ibot mask shape {mask.shape} != {(b, n)}")
        return np.nonzero(mask)
    idx = mask.reshape(-1, 2).astype(np.int64)
    if idx.size and (idx.min() < 0 or idx[:, 0].max() >= b or idx[:, 1].max() >= n):
        raise ValidationError(f"ibot mask index out of range for {b} images x {n} tokens")
    return idx[:, 0], idx[:, 1]


def ibot_loss(student_token_logits, teacher_token_logits, mask, params: DistillParams,
              teacher_temp: Optional[float] = None) -> Tensor:
    """Masked-token CE, averaged over the masked positions; exactly 0 when none are masked.

    ``mask`` is either a (B, N) boolean array or an (m, 2) array of
    (image, token) indices.
    """
    s = ac.as_tensor(student_token_logits)
    _check_k(s, params)
    b, n = s.shape[0], s.shape[1]
    rows, cols = _mask_indices(mask, b, n)
    if len(rows) == 0:
        return Tensor(0.0)
    pt = teacher_probs(np.asarray(getattr(teacher_token_logits, "data", teacher_token_logits))[rows, cols],
                       params, teacher_temp)
    logp = ac.log_softmax(s[rows, cols], axis=-1, temperature=params.student_temp)
    return ac.mean(-ac.sum_(logp * Tensor(pt, dtype=logp.data.dtype), axis=-1))


def center_update(c, teacher_batch_logits, momentum: float) -> np.ndarray:
    if not 0 <= momentum < 1:
        raise ValidationError(f"center momentum must lie in [0, 1), got {momentum}")
    t = np.asarray(getattr(teacher_batch_logits, "data", teacher_batch_logits), np.float64)
    batch_mean = t.reshape(-1, t.shape[-1]).mean(axis=0)
    return (momentum * np.asarray(c, np.float64) + (1 - momentum) * batch_mean).astype(np.float32)


# uniformity regularisers --------------------------------------------------


def koleo_loss(z, eps: float = KOLEO_EPS) -> Tensor:
    """Sum over rows of -log(squared distance to the nearest other row + eps)."""
    z = ac.as_tensor(z)
    n = z.shape[0]
    if n < 2:
        raise ValidationError(f"koleo_loss needs at least 2 rows, got {n}")
    zn = ac.l2_normalize(z)
    d = zn.data.astype(np.float64)
    gram = d @ d.T
    np.fill_diagonal(gram, -np.inf)
    nn = np.argmax(gram, axis=1)
    diff = zn - zn[nn]
    return ac.sum_(-ac.log(ac.sum_(diff * diff, axis=-1) + eps))


def kde_loss(z, kappa: float = 5.0) -> Tensor:
    """Sum over rows of log sum_{z' != z} exp(kappa z.z'), on L2-normalised rows."""
    z = ac.as_tensor(z)
    n = z.shape[0]
    if n < 2:
        raise ValidationError(f"kde_loss needs at least 2 rows, got {n}")
    if kappa <= 0:
        raise ValidationError(f"kappa must be positive, got {kappa}")
    zn = ac.l2_normalize(z)
    g = ac.matmul(zn, ac.transpose(zn)) * kappa
    return ac.sum_(ac.logsumexp(g, axis=1, mask=~np.eye(n, dtype=bool)))


def regularizer(z, weights: LossWeights) -> Tensor:
    if weights.regularizer == "koleo":
        return koleo_loss(z)
    if weights.regularizer == "kde":
        return kde_loss(z, weights.kde_kappa)
    return Tensor(0.0)
