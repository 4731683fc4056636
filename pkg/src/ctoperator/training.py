"""Training loop for the CTO model, plus dataset synthesis and evaluation helpers."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, adam_step
from .classical import FbpConfig, fbp
from .core import AngleSet, Image, SampleMask, Sinogram, add_gaussian_noise, apply_mask, make_rng
from .metrics import psnr
from .model import CtoConfig, cto_forward, init_params, loss_and_grads
from .phantom import random_phantom, rasterize
from .projector import ProjectorConfig, get_projector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    ladder: tuple[int, ...] = (15, 30, 60)
    steps_per_epoch: int | None = None   # None: one pass worth of steps (len(dataset))
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "ladder", tuple(int(v) for v in self.ladder))
        if not self.ladder or min(self.ladder) < 1:
            raise ValueError("view ladder must hold positive counts")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def full_views(self) -> int:
        return math.lcm(*self.ladder)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_psnr: float

    def line(self) -> str:
        return f"{self.epoch} {self.loss!r} {self.val_psnr!r}"


@dataclass
class TrainResult:
    params: dict
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def make_phantoms(count: int, cfg: CtoConfig, seed: int, rotate: bool = False) -> list[Image]:
    """Random ellipse phantoms on the model grid; ``rotate`` adds a random rotation."""
    rng = make_rng(seed)
    extent = cfg.image_size * cfg.spacing / 2
    out = []
    for _ in range(count):
        spec = random_phantom(rng, radius=extent)
        if rotate:
            spec = spec.rotated(float(rng.uniform(0, 2 * math.pi)))
        out.append(rasterize(spec, cfg.image_size, cfg.image_size, cfg.spacing))
    return out


def full_projector(cfg: CtoConfig, views: int, scale: int = 1) -> ProjectorConfig:
    n = cfg.image_size * scale
    return ProjectorConfig(n, n, AngleSet.uniform_views(views), cfg.det_count,
                           cfg.spacing / scale, cfg.det_spacing, cfg.step_fraction)


def measure(img: Image, cfg: CtoConfig, views: int, full_views: int | None = None) -> Sinogram:
    """Sparse-view measurement: project at ``full_views`` angles, keep a uniform stride."""
    full_views = views if full_views is None else full_views
    scale = img.width // cfg.image_size
    if scale < 1 or img.width != scale * cfg.image_size or img.height != img.width \
            or not math.isclose(img.spacing * scale, cfg.spacing, rel_tol=1e-12):
        raise ValueError("image grid is not an integer refinement of the model grid")
    proj = full_projector(cfg, full_views, scale)
    full = Sinogram(proj.angle_set, get_projector(proj).forward(img.values), cfg.det_spacing)
    return apply_mask(full, SampleMask.stride(full_views, views))


def train(cfg: CtoConfig, dataset: list[Image], epochs: int, seed: int,
          tcfg: TrainConfig = TrainConfig(), validation: list[Image] | None = None,
          params: dict | None = None) -> TrainResult:
    """Adam on the reconstruction MSE, one random (phantom, view count) pair per step."""
    if not dataset:
        raise ValueError("dataset must not be empty")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    rng = make_rng(seed)
    params = init_params(cfg, seed) if params is None else dict(params)
    full = tcfg.full_views
    sinos = [measure(img, cfg, full) for img in dataset]
    steps = tcfg.steps_per_epoch or len(dataset)
    state = AdamState.zeros(params)
    result = TrainResult(params)
    for epoch in range(1, epochs + 1):
        losses = []
        for _ in range(steps):
            i = int(rng.integers(len(dataset)))
            views = tcfg.ladder[int(rng.integers(len(tcfg.ladder)))]
            sino = apply_mask(sinos[i], SampleMask.stride(full, views))
            noise_seed = int(rng.integers(2 ** 63))
            if tcfg.noise_sigma > 0:
                sino = add_gaussian_noise(sino, tcfg.noise_sigma, noise_seed)
            loss, grads = loss_and_grads(params, sino, dataset[i], cfg)
            params, state = adam_step(params, grads, state, lr=tcfg.lr)
            losses.append(loss)
        result.step_losses.extend(losses)
        val = math.nan
        if validation:
            val = float(np.mean(evaluate(params, cfg, validation, min(tcfg.ladder))))
        rec = EpochRecord(epoch, float(np.mean(losses)), val)
        result.history.append(rec)
        log.info("epoch %d loss %.6g val_psnr %.4f", rec.epoch, rec.loss, rec.val_psnr)
    result.params = params
    return result


def evaluate(params: dict, cfg: CtoConfig, images: list[Image], views: int) -> list[float]:
    """PSNR of model reconstructions from ``views``-view measurements."""
    return [psnr(cto_forward(params, measure(img, cfg, views), cfg), img).value for img in images]


def evaluate_fbp(cfg: CtoConfig, images: list[Image], views: int) -> list[float]:
    out = []
    for img in images:
        sino = measure(img, cfg, views)
        rec = fbp(FbpConfig(pad_factor=cfg.fbp_pad_factor), cfg.projector(sino), sino)
        out.append(psnr(rec, img).value)
    return out
