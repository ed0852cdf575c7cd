"""Multi-scale loss, Adam, synthetic flow data and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from matplotlib.path import Path as PolygonPath

from .flowio import epe
from .tensor import DimensionError, Tensor, avg_pool, square, tsum
from .upsampler import NCUPModel, bilinear_baseline, ncup_upsample

logger = logging.getLogger(__name__)

PYRAMID_ALPHAS = {3: 0.32, 4: 0.08, 5: 0.02, 6: 0.01, 7: 0.005}


class LossConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LossConfig:
    """Level weights; level ``p`` lives at 1 / 2**(p-1) of full resolution."""

    alphas: dict[int, float] = field(default_factory=lambda: {1: 0.02, **PYRAMID_ALPHAS})

    def __post_init__(self):
        for level, alpha in self.alphas.items():
            if level < 1:
                raise LossConfigError(f"invalid level {level}")
            if not alpha > 0:
                raise LossConfigError(f"level {level} weight must be positive, got {alpha}")

    @property
    def levels(self) -> list[int]:
        return sorted(self.alphas)

    @classmethod
    def full_resolution(cls, alpha1: float = 0.02) -> "LossConfig":
        return cls({1: alpha1})


def multiscale_loss(preds: Mapping[int, Tensor], gts: Mapping[int, Tensor], cfg: LossConfig) -> Tensor:
    """Weighted sum over levels of the mean squared end-point distance."""
    total = None
    for level in cfg.levels:
        if level not in preds or level not in gts:
            raise LossConfigError(f"level {level} missing from predictions or ground truth")
        pred, gt = preds[level], gts[level]
        gt = gt if isinstance(gt, Tensor) else Tensor(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"level {level}: prediction {pred.shape} vs ground truth {gt.shape}")
        n, _, h, w = pred.shape
        term = tsum(square(pred - gt)) * (cfg.alphas[level] / (n * h * w))
        total = term if total is None else total + term
    if total is None:
        raise LossConfigError("loss configuration has no levels")
    return total


# ------------------------------------------------------------------------ Adam
@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns new parameter arrays and updates ``state``."""
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise DimensionError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        out.append(p - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps))
    return out, state


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr, self.betas, self.eps)
        for p, value in zip(self.params, new):
            p.data = value


# -------------------------------------------------------------- synthetic data
@dataclass
class SyntheticSample:
    flow_hr_gt: np.ndarray  # (1, 2, H, W)
    guidance_hr: np.ndarray  # (1, 3, H, W)
    flow_lr: np.ndarray  # (1, 2, H/s, W/s)
    seed: int
    scale: int
    labels: np.ndarray | None = None

    @property
    def guidance_lr(self) -> np.ndarray:
        return area_downsample(self.guidance_hr, self.scale)


def area_downsample(x: np.ndarray, s: int) -> np.ndarray:
    n, c, h, w = x.shape
    if h % s or w % s:
        raise DimensionError(f"{h}x{w} is not divisible by {s}")
    return x.reshape(n, c, h // s, s, w // s, s).mean(axis=(3, 5))


def _random_polygon(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    center = rng.uniform([0, 0], [w, h])
    radius = rng.uniform(0.15, 0.45) * min(h, w)
    k = int(rng.integers(3, 9))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    radii = radius * rng.uniform(0.6, 1.4, size=k)
    return center + np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)


def gen_synthetic(seed: int, H: int = 64, W: int = 64, s: int = 4, regions: int | None = None) -> SyntheticSample:
    """Piecewise-constant flow over random polygons, with a matching pseudo-RGB guidance."""
    if H % s or W % s:
        raise DimensionError(f"{H}x{W} is not divisible by scale {s}")
    rng = np.random.default_rng(seed)
    n_regions = int(rng.integers(2, 7)) if regions is None else int(regions)
    yy, xx = np.mgrid[0:H, 0:W]
    centers = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=1)
    labels = np.zeros((H, W), dtype=int)
    for r in range(1, n_regions):
        inside = PolygonPath(_random_polygon(rng, H, W)).contains_points(centers).reshape(H, W)
        labels[inside] = r
    motion = rng.uniform(-8.0, 8.0, size=(n_regions, 2))
    colors = rng.uniform(0.0, 1.0, size=(n_regions, 3))
    flow = motion[labels].transpose(2, 0, 1)[None]
    guidance = colors[labels].transpose(2, 0, 1)[None] + rng.normal(0.0, 0.02, size=(1, 3, H, W))
    return SyntheticSample(
        flow_hr_gt=flow,
        guidance_hr=guidance,
        flow_lr=area_downsample(flow, s),
        seed=seed,
        scale=s,
        labels=labels,
    )


# ---------------------------------------------------------------- training loop
@dataclass
class DataConfig:
    n_train: int = 500
    n_val: int = 50
    height: int = 64
    width: int = 64
    scale: int = 4
    train_seed0: int = 0
    val_seed0: int = 100_000
    batch_size: int = 1

    def train_samples(self) -> list[SyntheticSample]:
        return [gen_synthetic(self.train_seed0 + i, self.height, self.width, self.scale) for i in range(self.n_train)]

    def val_samples(self) -> list[SyntheticSample]:
        return [gen_synthetic(self.val_seed0 + i, self.height, self.width, self.scale) for i in range(self.n_val)]


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_epe_ncup: float
    val_epe_bilinear: float

    def csv(self) -> str:
        return f"{self.epoch},{self.train_loss:.6g},{self.val_epe_ncup:.6g},{self.val_epe_bilinear:.6g}"


LOG_HEADER = "epoch,train_loss,val_epe_ncup,val_epe_bilinear"


def _batch(samples: list[SyntheticSample]):
    return (
        np.concatenate([s.flow_lr for s in samples]),
        np.concatenate([s.guidance_lr for s in samples]),
        np.concatenate([s.flow_hr_gt for s in samples]),
    )


def _level_targets(pred: Tensor, gt: np.ndarray, cfg: LossConfig):
    preds, gts = {}, {}
    for level in cfg.levels:
        f = 2 ** (level - 1)
        if f == 1:
            preds[level], gts[level] = pred, Tensor(gt)
        else:
            preds[level], gts[level] = avg_pool(pred, f), Tensor(area_downsample(gt, f))
    return preds, gts


def evaluate(model: NCUPModel, samples: list[SyntheticSample]) -> tuple[float, float]:
    """Mean EPE of NCUP and of the bilinear baseline over ``samples``."""
    was_training = model.training
    model.eval()
    ncup, bil = [], []
    for smp in samples:
        ncup.append(epe(ncup_upsample(smp.flow_lr, smp.guidance_lr, model), smp.flow_hr_gt))
        bil.append(epe(bilinear_baseline(smp.flow_lr, smp.scale, rescale=False), smp.flow_hr_gt))
    model.train(was_training)
    return float(np.mean(ncup)), float(np.mean(bil))


def lr_at(epoch: int, lr: float, milestones=(10, 15)) -> float:
    """Step schedule: ``lr`` halved at each milestone epoch (0-based epoch counter)."""
    return lr * 0.5 ** sum(epoch >= m for m in milestones)


def train_loop(
    model: NCUPModel,
    data: DataConfig,
    epochs: int,
    lr: float = 1e-4,
    milestones=(10, 15),
    loss_cfg: LossConfig | None = None,
    seed: int = 0,
    on_epoch: Callable[[EpochLog], None] | None = None,
    train_samples: list[SyntheticSample] | None = None,
    val_samples: list[SyntheticSample] | None = None,
) -> tuple[NCUPModel, list[EpochLog]]:
    """Train the weights network and interpolation kernels jointly.

    Deterministic for a fixed ``seed``.  Raises :class:`TrainingDivergedError`
    naming the batch seeds if the loss becomes non-finite.
    """
    if model.scale != data.scale:
        raise ValueError(f"model scale {model.scale} differs from data scale {data.scale}")
    loss_cfg = loss_cfg or LossConfig.full_resolution()
    train_samples = data.train_samples() if train_samples is None else train_samples
    val_samples = data.val_samples() if val_samples is None else val_samples
    params = list(model.parameters().values())
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    log: list[EpochLog] = []
    model.train()

    for epoch in range(epochs):
        opt.lr = lr_at(epoch, lr, milestones)
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), data.batch_size):
            batch = [train_samples[i] for i in order[start : start + data.batch_size]]
            flow_lr, guide_lr, gt = _batch(batch)
            opt.zero_grad()
            pred = ncup_upsample(flow_lr, guide_lr, model)
            loss = multiscale_loss(*_level_targets(pred, gt, loss_cfg), loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                seeds = [b.seed for b in batch]
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch seeds {seeds}")
            loss.backward()
            opt.step()
            losses.append(value)
        model.eval()
        val_ncup, val_bil = evaluate(model, val_samples) if val_samples else (float("nan"),) * 2
        model.train()
        entry = EpochLog(epoch + 1, float(np.mean(losses)) if losses else float("nan"), val_ncup, val_bil)
        logger.info("epoch %d loss %.6g epe ncup %.6g bilinear %.6g", *vars(entry).values())
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    model.eval()
    return model, log
