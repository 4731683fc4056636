"""Image-quality metrics: PSNR, SSIM and RMSE on the Hounsfield scale."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import Image

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5

# linear attenuation of water near 70 keV
MU_WATER = {"mm": 0.0192, "cm": 0.192}


@dataclass(frozen=True)
class PsnrResult:
    value: float
    exact: bool = False

    def __float__(self) -> float:
        return self.value


def _pair(test, ref) -> tuple[np.ndarray, np.ndarray]:
    a = test.values if isinstance(test, Image) else np.asarray(test, dtype=float)
    b = ref.values if isinstance(ref, Image) else np.asarray(ref, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(test, ref, peak: float | None = None) -> PsnrResult:
    """Peak signal-to-noise ratio in dB.

    ``peak`` defaults to the maximum of ``ref``. Identical inputs give the
    capped value with ``exact`` set.
    """
    a, b = _pair(test, ref)
    if peak is None:
        peak = float(np.max(b))
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PsnrResult(PSNR_CAP, True)
    return PsnrResult(min(10 * math.log10(peak * peak / mse), PSNR_CAP))


def ssim(test, ref, peak: float | None = None) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), symmetric borders."""
    a, b = _pair(test, ref)
    if peak is None:
        peak = float(np.max(b) - np.min(b))
        if peak == 0:
            peak = 1.0
    if not peak > 0:
        raise ValueError("peak must be positive")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    # truncate 3.5 sigma -> radius 5 -> 11 taps
    blur = lambda z: gaussian_filter(z, SSIM_SIGMA, mode="reflect", truncate=3.5)  # noqa: E731
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def to_hu(mu: np.ndarray, mu_water: float) -> np.ndarray:
    return 1000.0 * (np.asarray(mu, dtype=float) - mu_water) / mu_water


def rmse_hu(test, ref, mu_water: float = MU_WATER["mm"]) -> float:
    if not mu_water > 0:
        raise ValueError("mu_water must be positive")
    a, b = _pair(test, ref)
    # the offset cancels, so the difference only needs the scale factor
    return float(np.sqrt(np.mean((1000.0 * (a - b) / mu_water) ** 2)))


@dataclass
class MetricReport:
    """Per-image metrics plus mean/std aggregates."""

    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    rmse_hu: list[float] = field(default_factory=list)
    exact: list[bool] = field(default_factory=list)

    def add(self, name: str, test, ref, mu_water: float, peak: float | None = None) -> None:
        p = psnr(test, ref, peak)
        self.names.append(name)
        self.psnr.append(p.value)
        self.exact.append(p.exact)
        self.ssim.append(ssim(test, ref, peak))
        self.rmse_hu.append(rmse_hu(test, ref, mu_water))

    @property
    def count(self) -> int:
        return len(self.names)

    def aggregate(self) -> dict[str, tuple[float, float, int]]:
        out = {}
        for key in ("psnr", "ssim", "rmse_hu"):
            vals = np.asarray(getattr(self, key), dtype=float)
            if vals.size == 0:
                out[key] = (math.nan, math.nan, 0)
            else:
                out[key] = (float(vals.mean()), float(vals.std()), int(vals.size))
        return out

    def to_text(self) -> str:
        lines = []
        for i, name in enumerate(self.names):
            flag = " (exact match)" if self.exact[i] else ""
            lines.append(f"{name}: psnr={self.psnr[i]:.6f} dB{flag} ssim={self.ssim[i]:.6f} "
                         f"rmse_hu={self.rmse_hu[i]:.6f}")
        for key, (mean, std, n) in self.aggregate().items():
            lines.append(f"{key}: mean={mean:.6f} std={std:.6f} count={n}")
        return "\n".join(lines) + "\n"

    def to_keyvalue(self) -> str:
        """One metric per line: ``name mean std count``."""
        return "".join(f"{key} {mean!r} {std!r} {n}\n"
                       for key, (mean, std, n) in self.aggregate().items())
