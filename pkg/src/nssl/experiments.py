"""Desk-scale experiments on the synthetic nucleus set.

``ssl_signal`` trains MoCo v3 and compares the linear-probe accuracy of the
trained encoder with a frozen random encoder and an oracle probe on the raw
generative parameters.  ``stain_robustness`` trains pairs of encoders that
differ only in colour augmentation and measures how far held-out stain shifts
move their embeddings.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import analysis
from . import augment
from . import encoder as E
from . import probe as P
from . import synthetic as S
from . import trainer as T


def center_embed(enc: E.EncoderState, images: np.ndarray) -> np.ndarray:
    size = enc.config.image_size
    return E.encode(enc, np.stack([augment.center_crop(p, size) for p in images]))


def _probe(x, labels, folds, seed) -> float:
    return P.probe_classification(x, labels, folds, seed=seed).summary()["balanced_accuracy"][0]


@dataclass
class SignalConfig:
    n: int = 2000
    data_seed: int = 0
    folds: int = 5
    branch: str = "student"
    train: T.TrainConfig = field(default_factory=lambda: T.TrainConfig(
        preset="mocov3", encoder="tiny", batch_size=64, epochs=20, steps_per_epoch=150,
        warmup_steps=60, policy="a1-nocolor"))


@dataclass
class SignalResult:
    trained: float
    random: float
    oracle: float
    train_seconds: float
    total_seconds: float
    final_loss: float
    final_std: float

    def lines(self) -> list[str]:
        return [f"trained encoder balanced accuracy {self.trained:.3f}",
                f"random encoder balanced accuracy {self.random:.3f}",
                f"oracle (generative parameters) balanced accuracy {self.oracle:.3f}",
                f"final loss {self.final_loss:.3f}, per-dim std {self.final_std:.4f}",
                f"train {self.train_seconds:.0f} s, total {self.total_seconds:.0f} s"]


def ssl_signal(cfg: SignalConfig = SignalConfig(), progress: Optional[Callable] = None) -> SignalResult:
    t0 = time.perf_counter()
    data = S.make_dataset(S.SyntheticConfig(n=cfg.n, seed=cfg.data_seed))
    folds = P.stratified_kfold(data.labels, cfg.folds, cfg.data_seed)
    state, hist = T.train(cfg.train, data.images, progress=progress)
    t1 = time.perf_counter()
    enc = state.student if cfg.branch == "student" else state.teacher
    trained = _probe(center_embed(enc, data.images), data.labels, folds, cfg.train.seed)
    rand_enc = T.init_train_state(cfg.train).student
    random = _probe(center_embed(rand_enc, data.images), data.labels, folds, cfg.train.seed)
    oracle = _probe(data.params, data.labels, folds, cfg.train.seed)
    return SignalResult(trained, random, oracle, t1 - t0, time.perf_counter() - t0,
                        hist[-1].loss, hist[-1].per_dim_std)


@dataclass
class RobustnessConfig:
    n: int = 1000
    data_seed: int = 0
    seeds: tuple = (0, 1, 2)
    policy: str = "a1+gmm1"
    shifts: int = 5
    shift_seed: int = 5000          # held out from the data and training seeds
    shift_magnitude: float = 0.15
    k: int = 100
    pca_dim: int = 64
    train: T.TrainConfig = field(default_factory=lambda: T.TrainConfig(
        preset="mocov3", encoder="tiny", batch_size=64, epochs=10, steps_per_epoch=40,
        warmup_steps=40))


@dataclass
class RobustnessResult:
    policy: str
    baseline: str
    overlap: dict          # policy name -> per-seed mean overlap
    cosine: dict

    def wins(self) -> list[bool]:
        return [a > b for a, b in zip(self.overlap[self.policy], self.overlap[self.baseline])]

    def lines(self) -> list[str]:
        out = []
        for name in (self.policy, self.baseline):
            ov = " ".join(f"{v:.4f}" for v in self.overlap[name])
            co = " ".join(f"{v:.4f}" for v in self.cosine[name])
            out.append(f"{name}: overlap per seed [{ov}] cosine per seed [{co}]")
        out.append(f"colour-augmented wins per seed: {self.wins()}")
        return out


def stain_robustness(cfg: RobustnessConfig = RobustnessConfig(),
                     progress: Optional[Callable] = None) -> RobustnessResult:
    data = S.make_dataset(S.SyntheticConfig(n=cfg.n, seed=cfg.data_seed))
    shifted = []
    for i in range(cfg.shifts):
        m, intensity = S.shifted_basis(cfg.shift_seed + i, cfg.shift_magnitude)
        shifted.append(data.render(m, intensity))
    baseline = cfg.policy + augment.NOCOLOR_SUFFIX
    overlap = {cfg.policy: [], baseline: []}
    cosine = {cfg.policy: [], baseline: []}
    for seed in cfg.seeds:
        for name in (cfg.policy, baseline):
            tc = dataclasses.replace(cfg.train, policy=name, seed=seed)
            state, _ = T.train(tc, data.images)
            orig = center_embed(state.student, data.images)
            rep = analysis.shift_metrics(orig, [center_embed(state.student, s) for s in shifted],
                                         k=cfg.k, pca_dim=cfg.pca_dim)
            summ = rep.summary()
            overlap[name].append(summ["overlap"][0])
            cosine[name].append(summ["cosine"][0])
            if progress:
                progress(seed, name, summ)
    return RobustnessResult(cfg.policy, baseline, overlap, cosine)
