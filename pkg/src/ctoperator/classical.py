"""Learning-free baselines: filtered backprojection and SART."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import Image, Sinogram
from .projector import ProjectorConfig, get_projector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FbpConfig:
    filter: str = "ramp"
    pad_factor: int = 2

    def __post_init__(self):
        if self.filter not in ("ramp", "none"):
            raise ValueError(f"unknown filter {self.filter!r}")
        if self.pad_factor < 2:
            raise ValueError("pad_factor must be >= 2")


@dataclass(frozen=True)
class SartConfig:
    iterations: int = 5
    relaxation: float = 0.15
    clip_min: float = 0.0
    clip_max: float = 0.549

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.relaxation < 2:
            raise ValueError("relaxation must lie in [0, 2)")
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be below clip_max")


def fft_length(det_count: int, pad_factor: int) -> int:
    return 1 << math.ceil(math.log2(pad_factor * det_count))


def ramp_response(n_fft: int) -> np.ndarray:
    """|omega| with omega in units of the Nyquist frequency (DC -> 0, Nyquist -> 1)."""
    return np.abs(2.0 * np.fft.fftfreq(n_fft))


def filter_rows(values: np.ndarray, cfg: FbpConfig = FbpConfig()) -> np.ndarray:
    """Zero-pad each detector row, apply the frequency response, crop back.

    The operator is symmetric (real, even response), so it is its own transpose.
    """
    if cfg.filter == "none":
        return np.array(values, dtype=float)
    det = values.shape[-1]
    n_fft = fft_length(det, cfg.pad_factor)
    spec = np.fft.fft(values, n=n_fft, axis=-1) * ramp_response(n_fft)
    return np.fft.ifft(spec, axis=-1).real[..., :det]


def fbp_scale(proj: ProjectorConfig) -> float:
    # pi*detSpacing/(2K) for unit pixels; the remaining factor carries the
    # physical units of the ramp and of the backprojection weights
    return math.pi * proj.det_spacing / (2 * proj.views) / (proj.det_spacing * proj.spacing ** 2)


def fbp_array(values: np.ndarray, proj: ProjectorConfig, cfg: FbpConfig = FbpConfig()) -> np.ndarray:
    filtered = filter_rows(values, cfg)
    return get_projector(proj).adjoint(filtered) * fbp_scale(proj)


def fbp(cfg: FbpConfig, proj: ProjectorConfig, sino: Sinogram) -> Image:
    _check(proj, sino)
    return Image(fbp_array(sino.values, proj, cfg), proj.spacing)


def sart(cfg: SartConfig, proj: ProjectorConfig, sino: Sinogram, init: Image | None = None,
         history: list | None = None) -> Image:
    """Sequential per-view SART sweeps with clipping after every sweep.

    When ``history`` is a list, the data residual ``||A x - p||`` is appended
    before the first sweep and after each sweep.
    """
    _check(proj, sino)
    op = get_projector(proj)
    x = np.zeros(proj.image_shape) if init is None else np.array(init.values, dtype=float)
    if x.shape != proj.image_shape:
        raise ValueError("initial image does not match projector")
    weights = op.row_sums()
    blocks = [op.block(a) for a in range(proj.views)]
    blocks_t = [b.T.tocsr() for b in blocks]
    p = sino.values
    if history is not None:
        history.append(float(np.linalg.norm(op.forward(x) - p)))
    for _ in range(cfg.iterations):
        flat = x.ravel()
        for a in range(proj.views):
            w = weights[a]
            resid = p[a] - blocks[a] @ flat
            scaled = np.divide(resid, w, out=np.zeros_like(resid), where=w > 0)
            flat += cfg.relaxation * (blocks_t[a] @ scaled)
        np.clip(x, cfg.clip_min, cfg.clip_max, out=x)
        if history is not None:
            history.append(float(np.linalg.norm(op.forward(x) - p)))
    return Image(x, proj.spacing)


def _check(proj: ProjectorConfig, sino: Sinogram) -> None:
    if sino.values.shape != proj.sino_shape:
        raise ValueError(f"sinogram {sino.values.shape} does not match projector {proj.sino_shape}")
    if abs(sino.det_spacing - proj.det_spacing) > 1e-12 * proj.det_spacing:
        raise ValueError("detector spacing does not match projector")
    if (sino.angle_set.period != proj.angle_set.period
            or not np.allclose(sino.angles, proj.angle_set.angles, rtol=0, atol=1e-12)):
        raise ValueError("sinogram angles do not match projector")
