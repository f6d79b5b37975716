"""Teacher-student SSL training: MoCo v3 style contrastive or DINOv2-variant distillation."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import arraycore as ac
from . import augment, container
from . import encoder as E
from . import objectives as O
from .arraycore import Tensor
from .errors import ConfigError, FormatError, NonFiniteLoss, ValidationError

TRAIN_PRESETS = ("mocov3", "dinov2_variant")
LR_SCHEDULES = ("cosine", "constant")
COLLAPSE_STD = 0.01


@dataclass
class TrainConfig:
    preset: str = "mocov3"
    encoder: str = "tiny"
    encoder_overrides: dict = field(default_factory=dict)
    epochs: int = 20
    steps_per_epoch: int = 0          # 0: one pass over the data
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.04
    betas: tuple = (0.9, 0.95)
    adam_eps: float = 1e-8
    warmup_steps: int = 100
    lr_schedule: str = "cosine"       # cosine decay after warmup, or constant
    ema_start: float = 0.992
    ema_end: float = 1.0
    mask_ratio: float = 0.3
    prototypes: int = 256
    temperature: float = 0.2
    teacher_temp: float = 0.04
    teacher_temp_final: float = 0.07
    teacher_temp_warmup_frac: float = 0.3
    kde_kappa: float = 5.0
    seed: int = 0
    policy: str = "a1"
    workers: int = 1

    def __post_init__(self):
        if self.preset not in TRAIN_PRESETS:
            raise ConfigError(f"unknown training preset {self.preset!r}; choose from {TRAIN_PRESETS}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not (0 <= self.ema_start <= 1 and 0 <= self.ema_end <= 1):
            raise ConfigError("EMA momentum endpoints must lie in [0, 1]")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be non-negative")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}; choose from {LR_SCHEDULES}")
        if self.kde_kappa <= 0:
            raise ConfigError(f"kde_kappa must be positive, got {self.kde_kappa}")
        if self.epochs < 1 or self.warmup_steps < 0 or self.workers < 1:
            raise ConfigError("epochs and workers must be >= 1, warmup_steps >= 0")
        self.betas = tuple(self.betas)
        self.encoder_overrides = dict(self.encoder_overrides)

    def encoder_config(self) -> E.EncoderConfig:
        over = dict(self.encoder_overrides)
        if self.preset == "dinov2_variant":
            over.setdefault("prototypes", self.prototypes)
        return E.preset(self.encoder, **over)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# schedules ------------------------------------------------------------------


def lr_at(step: int, total: int, base_lr: float, warmup: int, schedule: str = "cosine") -> float:
    """Linear warmup reaching ``base_lr`` at ``warmup``, then cosine decay to 0 at ``total - 1``."""
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    if schedule == "constant":
        return base_lr
    span = max(total - 1 - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_momentum_at(step: int, total: int, start: float, end: float) -> float:
    progress = min(step / max(total - 1, 1), 1.0)
    return end - (end - start) * 0.5 * (1.0 + math.cos(math.pi * progress))


# state ------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict


@dataclass
class TrainState:
    config: TrainConfig
    student: E.EncoderState
    teacher: E.EncoderState
    opt: AdamState
    center: np.ndarray
    center_tokens: np.ndarray
    step: int = 0
    total_steps: int = 1


def _freeze(state: E.EncoderState) -> E.EncoderState:
    st = state.copy()
    for p in st.params.values():
        p.requires_grad = False
    return st


def init_train_state(cfg: TrainConfig, total_steps: int = 1) -> TrainState:
    ecfg = cfg.encoder_config()
    student = E.init_state(ecfg, cfg.seed)
    teacher = _freeze(student)
    zeros = {k: np.zeros_like(v.data) for k, v in student.params.items()}
    k = ecfg.prototypes if cfg.preset == "dinov2_variant" else 1
    return TrainState(cfg, student, teacher, AdamState(zeros, {k_: z.copy() for k_, z in zeros.items()}),
                      np.zeros(k, np.float32), np.zeros(k, np.float32), 0, total_steps)


def ema_update(teacher: E.EncoderState, student: E.EncoderState, m: float) -> E.EncoderState:
    """In place: teacher <- m * teacher + (1 - m) * student."""
    if set(teacher.params) != set(student.params):
        raise ValidationError("teacher and student parameter names differ")
    for name, t in teacher.params.items():
        s = student.params[name].data
        if t.data.shape != s.shape:
            raise ValidationError(f"teacher/student shape mismatch for {name}: {t.data.shape} vs {s.shape}")
        if m == 1.0:
            continue
        if m == 0.0:
            t.data = s.copy()
        else:
            t.data = (m * t.data + (1.0 - m) * s).astype(t.data.dtype)
    return teacher


def _decays(name: str, arr: np.ndarray) -> bool:
    # biases, norms, tokens and positional embeddings are conventionally not decayed
    return arr.ndim >= 2 and name.endswith(".w")


def adamw_step(state: TrainState, lr: float) -> None:
    cfg = state.config
    b1, b2 = cfg.betas
    t = state.step + 1
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in state.student.params.items():
        g = p.grad
        if g is None:
            continue
        m = state.opt.m[name]
        v = state.opt.v[name]
        m *= np.float32(b1)
        m += np.float32(1 - b1) * g
        v *= np.float32(b2)
        v += np.float32(1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if _decays(name, p.data) and cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)


# views and masks --------------------------------------------------------------


def make_views(policy, sources: np.ndarray, ids, epoch: int, seed: int, stain_model=None,
               workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    def one(i):
        ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, int(ids[i]), int(epoch)])
        return augment.two_views(policy, sources[i], ss, stain_model)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            pairs = list(ex.map(one, range(len(sources))))
    else:
        pairs = [one(i) for i in range(len(sources))]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def block_mask(rng: np.random.Generator, grid: int, ratio: float) -> np.ndarray:
    """Boolean (grid*grid,) mask built from random rectangles, exactly round(ratio * n) tokens."""
    n = grid * grid
    target = int(round(ratio * n))
    mask = np.zeros((grid, grid), bool)
    for _ in range(20):
        have = int(mask.sum())
        if have >= target:
            break
        area = rng.uniform(1, max(target - have, 1) + 1)
        aspect = math.exp(rng.uniform(math.log(0.3), math.log(1 / 0.3)))
        h = int(min(grid, max(1, round(math.sqrt(area * aspect)))))
        w = int(min(grid, max(1, round(math.sqrt(area / aspect)))))
        top = rng.integers(0, grid - h + 1)
        left = rng.integers(0, grid - w + 1)
        mask[top:top + h, left:left + w] = True
    flat = mask.reshape(-1)
    on = np.flatnonzero(flat)
    if len(on) > target:
        flat[rng.choice(on, len(on) - target, replace=False)] = False
    elif len(on) < target:
        off = np.flatnonzero(~flat)
        flat[rng.choice(off, target - len(on), replace=False)] = True
    return flat


# monitoring ---------------------------------------------------------------------


@dataclass
class CollapseReport:
    per_dim_std: float
    mean_cosine: float
    collapsed: bool


def collapse_monitor(embeddings) -> CollapseReport:
    z = np.asarray(embeddings, np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValidationError(f"collapse_monitor needs an (n >= 2, d) array, got {z.shape}")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    zn = z / np.maximum(norms, 1e-12)
    std = float(zn.std(axis=0).mean())
    gram = zn @ zn.T
    n = len(z)
    mean_cos = float((gram.sum() - np.trace(gram)) / (n * (n - 1)))
    return CollapseReport(std, mean_cos, std < COLLAPSE_STD)


# losses ------------------------------------------------------------------------


def _finite(name: str, value: Tensor) -> Tensor:
    if not np.all(np.isfinite(value.data)):
        raise NonFiniteLoss(f"loss term {name!r} is not finite ({float(np.asarray(value.data).ravel()[0])})")
    return value


def _term(name: str, fn):
    try:
        return _finite(name, fn())
    except ac.NonFiniteError as exc:
        raise NonFiniteLoss(f"loss term {name!r}: {exc}") from None


def _mocov3_loss(state: TrainState, v1, v2):
    cfg = state.config
    st, te = state.student, state.teacher
    f1, f2 = E.features(st, v1), E.features(st, v2)
    q1, q2 = E.predict(st, E.project(st, f1)), E.predict(st, E.project(st, f2))
    with ac.no_grad():
        k1 = E.project(te, E.features(te, v1)).data
        k2 = E.project(te, E.features(te, v2)).data
    a = _term("info_nce_12", lambda: O.info_nce(q1, k2, tau=cfg.temperature))
    b = _term("info_nce_21", lambda: O.info_nce(q2, k1, tau=cfg.temperature))
    return a + b, {"info_nce": float(a.data + b.data)}, f1


def _dino_loss(state: TrainState, v1, v2):
    cfg = state.config
    st, te = state.student, state.teacher
    ecfg = st.config
    weights = dataclasses.replace(O.objective_preset("dinov2_variant").weights, kde_kappa=cfg.kde_kappa)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, state.step, 7]))
    b = v1.shape[0]
    masks = [np.stack([block_mask(rng, ecfg.grid, cfg.mask_ratio) for _ in range(b)]) for _ in range(2)]
    temps = dict(teacher_temp=cfg.teacher_temp, teacher_temp_final=cfg.teacher_temp_final,
                 teacher_temp_warmup=int(cfg.teacher_temp_warmup_frac * state.total_steps))
    params = O.DistillParams(prototypes=ecfg.prototypes, center=state.center, **temps)
    tparams = O.DistillParams(prototypes=ecfg.prototypes, center=state.center_tokens, **temps)
    ttemp = params.teacher_temp_at(state.step)

    def heads(enc, views, masks_):
        cls_logits, tok_logits, pooled = [], [], []
        for v, m in zip(views, masks_):
            tokens = E.forward_tokens(enc, v, m)
            feats = E.pool(enc, tokens)
            pooled.append(feats)
            cls_logits.append(E.prototype_logits(enc, E.project(enc, feats)))
            patch = ac.reshape(tokens[:, 1:], (b * ecfg.num_patches, ecfg.width))
            tl = E.prototype_logits(enc, E.project(enc, patch))
            tok_logits.append(ac.reshape(tl, (b, ecfg.num_patches, ecfg.prototypes)))
        return cls_logits, tok_logits, pooled

    s_cls, s_tok, s_pool = heads(st, (v1, v2), masks)
    with ac.no_grad():
        t_cls, t_tok, _ = heads(te, (v1, v2), (None, None))
    t_cls_arr = np.stack([t.data for t in t_cls])
    dino = _term("dino_global", lambda: O.dino_global(ac.stack(s_cls, axis=0), t_cls_arr, params, ttemp))
    ibot = _term("ibot", lambda: (O.ibot_loss(s_tok[0], t_tok[0].data, masks[0], tparams, ttemp)
                                  + O.ibot_loss(s_tok[1], t_tok[1].data, masks[1], tparams, ttemp)) * 0.5)
    # the regulariser acts on student embeddings: teacher outputs carry no gradient
    reg = _term("regularizer", lambda: O.regularizer(s_pool[0], weights) * (1.0 / b))
    loss = dino + ibot * weights.ibot + reg * weights.regularizer_weight
    state.center = O.center_update(state.center, t_cls_arr, params.center_momentum)
    state.center_tokens = O.center_update(state.center_tokens, np.stack([t.data for t in t_tok]),
                                          tparams.center_momentum)
    return loss, {"dino": float(dino.data), "ibot": float(ibot.data), "reg": float(reg.data)}, s_pool[0]


@dataclass
class StepResult:
    loss: float
    terms: dict
    lr: float
    ema_m: float
    per_dim_std: float


def train_step(state: TrainState, views: tuple[np.ndarray, np.ndarray]) -> StepResult:
    """One optimisation step on pre-augmented views (v1, v2) of the same batch."""
    v1, v2 = views
    if v1.shape[0] < 2 or v1.shape != v2.shape:
        raise ValidationError(f"need two matching view batches of size >= 2, got {v1.shape}, {v2.shape}")
    cfg = state.config
    for p in state.student.params.values():
        p.grad = None
    fn = _mocov3_loss if cfg.preset == "mocov3" else _dino_loss
    loss, terms, pooled = fn(state, v1, v2)
    _finite("total", loss)
    loss.backward()
    if any(p.grad is not None or p.requires_grad for p in state.teacher.params.values()):
        raise AssertionError("teacher parameters entered the optimisation graph")
    lr = lr_at(state.step, state.total_steps, cfg.base_lr, cfg.warmup_steps, cfg.lr_schedule)
    m = ema_momentum_at(state.step, state.total_steps, cfg.ema_start, cfg.ema_end)
    adamw_step(state, lr)
    ema_update(state.teacher, state.student, m)
    state.step += 1
    report = collapse_monitor(pooled.data)
    return StepResult(float(loss.data), terms, lr, m, report.per_dim_std)


def train_on_batch(state: TrainState, sources: np.ndarray, ids, epoch: int, policy,
                   stain_model=None) -> StepResult:
    views = make_views(policy, sources, ids, epoch, state.config.seed, stain_model, state.config.workers)
    return train_step(state, views)


# full runs ------------------------------------------------------------------------


def prepare_policy(cfg: TrainConfig, sources: np.ndarray):
    """Resolve the policy, fill erasing with the dataset mean and fit any stain model."""
    policy = augment.get_policy(cfg.policy)
    mean = [float(x) for x in np.asarray(sources, np.float64).mean(axis=(0, 1, 2))]
    for t in policy.transforms:
        if t.name == "random_erasing":
            t.params = {**t.params, "fill": mean}
    model = None
    gmm = [t for t in policy.transforms if t.name == "stain_gmm"]
    if gmm:
        model = augment.fit_stain_model(sources, int(gmm[0].params.get("components", 1)), seed=cfg.seed)
    return policy, model


def steps_per_epoch(cfg: TrainConfig, n: int) -> int:
    return cfg.steps_per_epoch or max(n // cfg.batch_size, 1)


def log_line(step: int, res: StepResult) -> str:
    return f"{step}\t{res.loss:.6f}\t{res.lr:.6e}\t{res.ema_m:.6f}\t{res.per_dim_std:.6f}"


def train(cfg: TrainConfig, sources: np.ndarray, log_path=None, state: Optional[TrainState] = None,
          progress=None, stop_after: Optional[int] = None) -> tuple[TrainState, list[StepResult]]:
    """Run (or resume) training; ``stop_after`` halts once that global step count is reached."""
    sources = np.asarray(sources, np.float32)
    if sources.ndim != 4 or sources.shape[0] < cfg.batch_size:
        raise ValidationError(f"need at least batch_size={cfg.batch_size} source patches, got {sources.shape}")
    spe = steps_per_epoch(cfg, len(sources))
    total = cfg.epochs * spe
    end = total if stop_after is None else min(total, stop_after)
    if state is None:
        state = init_train_state(cfg, total)
    state.total_steps = total
    policy, stain_model = prepare_policy(cfg, sources)
    history = []
    log = open(log_path, "a" if state.step else "w") if log_path else None
    try:
        while state.step < end:
            epoch, k = divmod(state.step, spe)
            order = np.random.default_rng(
                np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, epoch, 2])).permutation(len(sources))
            ids = order[(k * cfg.batch_size) % len(sources):][:cfg.batch_size]
            if len(ids) < cfg.batch_size:
                ids = np.concatenate([ids, order[:cfg.batch_size - len(ids)]])
            step = state.step
            res = train_on_batch(state, sources[ids], ids, epoch, policy, stain_model)
            history.append(res)
            if log:
                log.write(log_line(step, res) + "\n")
            if progress:
                progress(step, res)
    finally:
        if log:
            log.close()
    return state, history


# checkpoints ----------------------------------------------------------------------


CHECKPOINT_KIND = "checkpoint"


def _portable_config(cfg: TrainConfig) -> dict:
    # worker count does not affect results, so it stays out of the checkpoint
    d = cfg.to_dict()
    d.pop("workers", None)
    return d


def checkpoint_bytes(state: TrainState) -> bytes:
    blocks = {}
    for prefix, src in (("student.", state.student.params), ("teacher.", state.teacher.params)):
        for k, v in src.items():
            blocks[prefix + k] = v.data
    for k in state.student.params:
        blocks["opt.m." + k] = state.opt.m[k]
        blocks["opt.v." + k] = state.opt.v[k]
    blocks["center"] = state.center
    blocks["center_tokens"] = state.center_tokens
    meta = {"kind": CHECKPOINT_KIND, "train_config": _portable_config(state.config),
            "encoder_config": state.student.config.to_dict(),
            "step": state.step, "total_steps": state.total_steps}
    return container.dumps(meta, blocks)


def checkpoint_save(state: TrainState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def checkpoint_from_bytes(buf: bytes, expect: Optional[TrainConfig] = None) -> TrainState:
    meta, blocks = container.loads(buf)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise FormatError(f"not a training checkpoint (kind={meta.get('kind')!r})")
    cfg = TrainConfig.from_dict(meta["train_config"])
    ecfg = meta["encoder_config"]
    if expect is not None and expect.encoder_config().to_dict() != ecfg:
        raise ValidationError("checkpoint encoder config does not match the requested config")
    student = E.state_from_blocks(ecfg, blocks, "student.")
    for p in student.params.values():
        p.requires_grad = True
    teacher = _freeze(E.state_from_blocks(ecfg, blocks, "teacher."))
    m = {k: blocks["opt.m." + k].copy() for k in student.params}
    v = {k: blocks["opt.v." + k].copy() for k in student.params}
    return TrainState(expect or cfg, student, teacher, AdamState(m, v), blocks["center"].copy(),
                      blocks["center_tokens"].copy(), int(meta["step"]), int(meta["total_steps"]))


def checkpoint_load(path, expect: Optional[TrainConfig] = None) -> TrainState:
    return checkpoint_from_bytes(Path(path).read_bytes(), expect)
