"""Small vision transformer for nucleus patches, with projector/predictor heads."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import arraycore as ac
from . import container
from .arraycore import Tensor
from .errors import ValidationError

POOLINGS = ("class_token", "center_tokens")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 40
    patch_size: int = 8
    depth: int = 12
    width: int = 384
    heads: int = 6
    mlp_ratio: float = 4.0
    pooling: str = "class_token"
    center_grid: int = 3
    projector_dims: tuple = (4096, 4096, 256)
    predictor_dims: tuple = (4096, 256)
    # DINO/iBOT prototype head on top of the projector; 0 disables it.
    prototypes: int = 0
    # hidden-layer normalisation in projector/predictor: "batch" statistics or per-row "layer"
    head_norm: str = "batch"

    def __post_init__(self):
        object.__setattr__(self, "projector_dims", tuple(int(d) for d in self.projector_dims))
        object.__setattr__(self, "predictor_dims", tuple(int(d) for d in self.predictor_dims))
        if self.image_size % self.patch_size:
            raise ValidationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise ValidationError(f"width {self.width} not divisible by heads {self.heads}")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.pooling == "center_tokens" and not 1 <= self.center_grid <= self.grid:
            raise ValidationError(
                f"center_grid {self.center_grid} must lie in [1, {self.grid}]")
        if self.head_norm not in ("batch", "layer"):
            raise ValidationError(f"head_norm must be 'batch' or 'layer', got {self.head_norm!r}")
        if self.depth < 0 or self.mlp_ratio <= 0:
            raise ValidationError("depth must be >= 0 and mlp_ratio > 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def hidden(self) -> int:
        return int(round(self.width * self.mlp_ratio))

    @property
    def embed_dim(self) -> int:
        return self.projector_dims[-1] if self.projector_dims else self.width

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["projector_dims"] = list(self.projector_dims)
        d["predictor_dims"] = list(self.predictor_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # depth/width/heads of the standard ViT-S, patch 8
    "vits8": EncoderConfig(),
    "vitb8": EncoderConfig(depth=12, width=768, heads=12,
                           projector_dims=(4096, 4096, 256), predictor_dims=(4096, 256)),
    # desk-scale encoder used by the training sanity checks
    "tiny": EncoderConfig(depth=2, width=64, heads=4, mlp_ratio=2.0,
                          projector_dims=(256, 256, 64), predictor_dims=(256, 64)),
    "toy": EncoderConfig(depth=2, width=32, heads=4, mlp_ratio=2.0,
                         projector_dims=(64, 32), predictor_dims=(64, 32)),
}


def preset(name: str, **overrides) -> EncoderConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown encoder preset {name!r}; choose from {sorted(PRESETS)}") from None
    return dataclasses.replace(base, **overrides) if overrides else base


# parameters ---------------------------------------------------------------


def _mlp_shapes(prefix: str, dims_in: int, dims: tuple) -> dict:
    shapes = {}
    d = dims_in
    for j, out in enumerate(dims):
        shapes[f"{prefix}.{j}.w"] = (d, out)
        shapes[f"{prefix}.{j}.b"] = (out,)
        if j < len(dims) - 1:
            shapes[f"{prefix}.{j}.norm.w"] = (out,)
            shapes[f"{prefix}.{j}.norm.b"] = (out,)
        d = out
    return shapes


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    d, p = cfg.width, cfg.patch_size
    shapes = {
        "patch_embed.w": (p * p * 3, d),
        "patch_embed.b": (d,),
        "cls_token": (1, 1, d),
        "mask_token": (d,),
        "pos_embed": (1, 1 + cfg.num_patches, d),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        shapes.update({
            f"{b}.ln1.w": (d,), f"{b}.ln1.b": (d,),
            f"{b}.attn.qkv.w": (d, 3 * d), f"{b}.attn.qkv.b": (3 * d,),
            f"{b}.attn.proj.w": (d, d), f"{b}.attn.proj.b": (d,),
            f"{b}.ln2.w": (d,), f"{b}.ln2.b": (d,),
            f"{b}.mlp.fc1.w": (d, cfg.hidden), f"{b}.mlp.fc1.b": (cfg.hidden,),
            f"{b}.mlp.fc2.w": (cfg.hidden, d), f"{b}.mlp.fc2.b": (d,),
        })
    shapes["norm.w"] = (d,)
    shapes["norm.b"] = (d,)
    shapes.update(_mlp_shapes("projector", d, cfg.projector_dims))
    shapes.update(_mlp_shapes("predictor", cfg.embed_dim, cfg.predictor_dims))
    if cfg.prototypes:
        shapes["prototypes.w"] = (cfg.embed_dim, cfg.prototypes)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(np.float32)


def _xavier_uniform(rng: np.random.Generator, name: str, shape) -> np.ndarray:
    fan_in, fan_out = shape
    if name.endswith("attn.qkv.w"):
        fan_out //= 3  # q, k and v count as separate projections
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict = field(default_factory=dict)

    def copy(self) -> "EncoderState":
        return EncoderState(self.config, {k: Tensor(v.data.copy(), dtype=v.data.dtype)
                                          for k, v in self.params.items()})

    def astype(self, dtype) -> "EncoderState":
        return EncoderState(self.config, {k: Tensor(v.data, dtype=dtype)
                                          for k, v in self.params.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def validate(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValidationError(f"parameter names disagree with config: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            got = self.params[name].shape
            if tuple(got) != tuple(shape):
                raise ValidationError(f"parameter {name} has shape {got}, config implies {shape}")
            if not np.all(np.isfinite(self.params[name].data)):
                raise ValidationError(f"parameter {name} is not finite")


def init_state(cfg: EncoderConfig, seed: int = 0) -> EncoderState:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("ln.w", "ln1.w", "ln2.w", "norm.w")):
            arr = np.ones(shape, np.float32)
        elif name.endswith(".b") or name == "mask_token":
            arr = np.zeros(shape, np.float32)
        elif name.endswith(".w") and len(shape) == 2:
            arr = _xavier_uniform(rng, name, shape)
        else:
            arr = _trunc_normal(rng, shape)
        params[name] = Tensor(arr, requires_grad=True)
    return EncoderState(cfg, params)


def zero_state(cfg: EncoderConfig) -> EncoderState:
    return EncoderState(cfg, {n: Tensor(np.zeros(s, np.float32), requires_grad=True)
                              for n, s in param_shapes(cfg).items()})


# forward ------------------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, N, patch*patch*3), row-major over the patch grid."""
    b, h, w, c = images.shape
    g = h // patch
    x = images.reshape(b, g, patch, g, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * c)


def _check_images(cfg: EncoderConfig, images) -> np.ndarray:
    images = np.asarray(images)
    want = (cfg.image_size, cfg.image_size, 3)
    if images.ndim != 4 or images.shape[1:] != want:
        raise ValidationError(f"expected a batch of shape (B, {want[0]}, {want[1]}, 3), got {images.shape}")
    return images


def _attention(P, b: str, x: Tensor, heads: int) -> Tensor:
    bsz, t, d = x.shape
    dh = d // heads
    qkv = ac.linear(x, P[f"{b}.attn.qkv.w"], P[f"{b}.attn.qkv.b"])
    qkv = ac.transpose(ac.reshape(qkv, (bsz, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ac.matmul(q, ac.swapaxes(k, -1, -2)) * (dh ** -0.5)
    out = ac.matmul(ac.softmax(scores, axis=-1), v)
    out = ac.reshape(ac.transpose(out, (0, 2, 1, 3)), (bsz, t, d))
    return ac.linear(out, P[f"{b}.attn.proj.w"], P[f"{b}.attn.proj.b"])


def forward_tokens(state: EncoderState, images, mask: Optional[np.ndarray] = None,
                   token_perm: Optional[np.ndarray] = None) -> Tensor:
    """Backbone output after the final norm, shape (B, 1 + N, width).

    ``mask`` (B, N) replaces the selected patch embeddings with the mask token.
    ``token_perm`` reorders patch tokens together with their positional
    embeddings; it exists to probe attention equivariance.
    """
    cfg, P = state.config, state.params
    images = _check_images(cfg, images)
    bsz = images.shape[0]
    patches = Tensor(patchify(images, cfg.patch_size))
    x = ac.linear(patches, P["patch_embed.w"], P["patch_embed.b"])
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (bsz, cfg.num_patches):
            raise ValidationError(f"mask shape {mask.shape} != {(bsz, cfg.num_patches)}")
        x = ac.where(mask[..., None], P["mask_token"], x)
    pos = P["pos_embed"]
    pos_cls, pos_patch = pos[:, :1], pos[:, 1:]
    if token_perm is not None:
        x = x[:, token_perm]
        pos_patch = pos_patch[:, token_perm]
    cls = P["cls_token"] + pos_cls
    cls = ac.mul(cls, Tensor(np.ones((bsz, 1, 1))))
    x = ac.concat([cls, x + pos_patch], axis=1)
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        x = x + _attention(P, b, ac.layer_norm(x, P[f"{b}.ln1.w"], P[f"{b}.ln1.b"]), cfg.heads)
        h = ac.layer_norm(x, P[f"{b}.ln2.w"], P[f"{b}.ln2.b"])
        h = ac.gelu(ac.linear(h, P[f"{b}.mlp.fc1.w"], P[f"{b}.mlp.fc1.b"]))
        x = x + ac.linear(h, P[f"{b}.mlp.fc2.w"], P[f"{b}.mlp.fc2.b"])
    return ac.layer_norm(x, P["norm.w"], P["norm.b"])


def center_token_indices(cfg: EncoderConfig) -> np.ndarray:
    """Patch-token indices (0-based, excluding the class token) of the centred g x g block."""
    s, g = cfg.grid, cfg.center_grid
    start = (s - g) // 2
    rows = np.arange(start, start + g)
    return (rows[:, None] * s + rows[None, :]).reshape(-1)


def pool(state: EncoderState, tokens: Tensor) -> Tensor:
    cfg = state.config
    if cfg.pooling == "class_token":
        return tokens[:, 0]
    idx = center_token_indices(cfg) + 1
    return ac.mean(tokens[:, idx], axis=1)


def features(state: EncoderState, images, mask=None) -> Tensor:
    return pool(state, forward_tokens(state, images, mask))


def mlp_head(P, prefix: str, x: Tensor, n_layers: int, head_norm: str = "batch") -> Tensor:
    norm = ac.batch_norm if head_norm == "batch" else ac.layer_norm
    for j in range(n_layers):
        x = ac.linear(x, P[f"{prefix}.{j}.w"], P[f"{prefix}.{j}.b"])
        if j < n_layers - 1:
            x = ac.gelu(norm(x, P[f"{prefix}.{j}.norm.w"], P[f"{prefix}.{j}.norm.b"]))
    return x


def project(state: EncoderState, feats: Tensor) -> Tensor:
    return mlp_head(state.params, "projector", feats, len(state.config.projector_dims),
                    state.config.head_norm)


def predict(state: EncoderState, z: Tensor) -> Tensor:
    return mlp_head(state.params, "predictor", z, len(state.config.predictor_dims),
                    state.config.head_norm)


def prototype_logits(state: EncoderState, z: Tensor) -> Tensor:
    if not state.config.prototypes:
        raise ValidationError("encoder config has no prototype head (prototypes=0)")
    # weight-normalised prototypes: logits are cosines in [-1, 1]
    w = ac.transpose(ac.l2_normalize(ac.transpose(state.params["prototypes.w"])))
    return ac.matmul(ac.l2_normalize(z), w)


def encode(state: EncoderState, images, batch_size: int = 256) -> np.ndarray:
    """Pooled backbone embeddings (n, width) as float32, computed without a graph."""
    cfg = state.config
    images = _check_images(cfg, images)
    out = np.empty((images.shape[0], cfg.width), np.float32)
    with ac.no_grad():
        for s in range(0, images.shape[0], batch_size):
            out[s:s + batch_size] = features(state, images[s:s + batch_size]).data
    return out


# FLOPs --------------------------------------------------------------------


def _mlp_macs(d_in: int, dims: tuple) -> int:
    total, d = 0, d_in
    for out in dims:
        total += d * out
        d = out
    return total


def flops_breakdown(cfg: EncoderConfig) -> dict[str, int]:
    """Multiply-accumulate counts per image (1 MAC counted as 1 FLOP)."""
    n = cfg.num_patches
    t = n + 1
    d = cfg.width
    per_block = (
        t * d * 3 * d      # qkv
        + t * t * d        # q k^T over all heads
        + t * t * d        # attention-weighted values
        + t * d * d        # output projection
        + 2 * t * d * cfg.hidden
    )
    heads = _mlp_macs(d, cfg.projector_dims) + _mlp_macs(cfg.embed_dim, cfg.predictor_dims)
    heads += cfg.embed_dim * cfg.prototypes
    return {
        "patch_embed": n * cfg.patch_size ** 2 * 3 * d,
        "per_block": per_block,
        "blocks": cfg.depth * per_block,
        "heads": heads,
    }


def flops_estimate(cfg: EncoderConfig) -> float:
    b = flops_breakdown(cfg)
    return float(b["patch_embed"] + b["blocks"] + b["heads"])


# serialisation ------------------------------------------------------------


def to_bytes(state: EncoderState) -> bytes:
    return container.dumps({"kind": "encoder", "config": state.config.to_dict()}, state.arrays())


def state_from_blocks(cfg_dict: dict, blocks: dict, prefix: str = "") -> EncoderState:
    cfg = EncoderConfig.from_dict(cfg_dict)
    params = {k[len(prefix):]: Tensor(v, requires_grad=True)
              for k, v in blocks.items() if k.startswith(prefix)}
    state = EncoderState(cfg, params)
    state.validate()
    return state


def from_bytes(buf: bytes) -> EncoderState:
    meta, blocks = container.loads(buf)
    if meta.get("kind") != "encoder":
        raise ValidationError(f"not an encoder file (kind={meta.get('kind')!r})")
    return state_from_blocks(meta["config"], blocks)


def save(state: EncoderState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(state))


def load(path) -> EncoderState:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
