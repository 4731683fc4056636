"""Discrete parallel-beam Radon transform and its exact transpose.

Each ray ``x cos(theta) + y sin(theta) = r`` is sampled at equally spaced
points ``t_k`` (symmetric about the foot point, spanning the image diagonal)
and the image is bilinearly interpolated at every sample. The resulting
(ray, pixel, weight) triplets define a sparse matrix; ``adjoint`` scatters
with the identical weights, so the pair is a transpose pair up to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import AngleSet, Image, Sinogram

# largest triplet count assembled into an explicit sparse matrix
_ASSEMBLY_LIMIT = 12_000_000


@dataclass(frozen=True, eq=False)
class ProjectorConfig:
    width: int
    height: int
    angle_set: AngleSet
    det_count: int
    spacing: float = 1.0
    det_spacing: float = 1.0
    step_fraction: float = 0.5
    geometry: str = field(default="parallel")

    def __post_init__(self):
        if self.geometry != "parallel":
            raise ValueError("only parallel-beam geometry is supported")
        if not 0 < self.step_fraction <= 1:
            raise ValueError("step_fraction must lie in (0, 1]")
        if self.width < 1 or self.height < 1 or self.det_count < 1:
            raise ValueError("dimensions must be positive")

    @classmethod
    def default(cls, size: int = 256, views: int = 720, det_count: int = 300,
                spacing: float = 1.0, **kw) -> "ProjectorConfig":
        return cls(size, size, AngleSet.uniform_views(views), det_count, spacing,
                   kw.pop("det_spacing", spacing), **kw)

    def key(self) -> tuple:
        return (self.width, self.height, self.angle_set.angles.tobytes(), self.angle_set.period,
                self.det_count, self.spacing, self.det_spacing, self.step_fraction)

    def with_angles(self, angle_set: AngleSet) -> "ProjectorConfig":
        return ProjectorConfig(self.width, self.height, angle_set, self.det_count, self.spacing,
                               self.det_spacing, self.step_fraction)

    def with_image(self, width: int, height: int, spacing: float) -> "ProjectorConfig":
        return ProjectorConfig(width, height, self.angle_set, self.det_count, spacing,
                               self.det_spacing, self.step_fraction)

    def with_step(self, step_fraction: float) -> "ProjectorConfig":
        return ProjectorConfig(self.width, self.height, self.angle_set, self.det_count,
                               self.spacing, self.det_spacing, step_fraction)

    @property
    def views(self) -> int:
        return len(self.angle_set)

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.views, self.det_count)


class Projector:
    """Weight tables for one configuration; obtain via :func:`get_projector`."""

    def __init__(self, cfg: ProjectorConfig):
        self.cfg = cfg
        h = cfg.step_fraction * cfg.spacing
        half_diag = 0.5 * cfg.spacing * math.hypot(cfg.width, cfg.height)
        n = 2 * math.ceil(half_diag / h) + 1
        self._t = (np.arange(n) - (n - 1) / 2) * h
        self._step = h
        self._r = (np.arange(cfg.det_count) - (cfg.det_count - 1) / 2) * cfg.det_spacing
        est = cfg.views * cfg.det_count * n * 4
        self._blocks = None
        self._matrix = None
        if est <= _ASSEMBLY_LIMIT:
            self._blocks = [self._block(a) for a in range(cfg.views)]
            self._matrix = sp.vstack(self._blocks, format="csr")
            self._matrix_t = self._matrix.T.tocsr()
        self._norm_sq = None
        reach = math.hypot(abs(self._r).max(initial=0.0), abs(self._t).max()) / cfg.spacing
        self._margin = max(2, math.ceil(reach - min(cfg.width, cfg.height) / 2) + 2)

    def _triplets(self, a: int):
        cfg = self.cfg
        theta = cfg.angle_set.angles[a]
        c, s = math.cos(theta), math.sin(theta)
        r = self._r[:, None]
        t = self._t[None, :]
        fi = (r * c - t * s) / cfg.spacing + (cfg.width - 1) / 2
        fj = (r * s + t * c) / cfg.spacing + (cfg.height - 1) / 2
        ray = np.broadcast_to(np.arange(cfg.det_count)[:, None], fi.shape)
        keep = (fi > -1) & (fi < cfg.width) & (fj > -1) & (fj < cfg.height)
        fi, fj, ray = fi[keep], fj[keep], ray[keep]
        i0 = np.floor(fi).astype(np.int64)
        j0 = np.floor(fj).astype(np.int64)
        wx = fi - i0
        wy = fj - j0
        rows, cols, vals = [], [], []
        for di, dj, w in ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)),
                          (0, 1, (1 - wx) * wy), (1, 1, wx * wy)):
            ii, jj = i0 + di, j0 + dj
            ok = (ii >= 0) & (ii < cfg.width) & (jj >= 0) & (jj < cfg.height) & (w > 0)
            rows.append(ray[ok])
            cols.append(jj[ok] * cfg.width + ii[ok])
            vals.append(w[ok] * self._step)
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

    def _block(self, a: int) -> sp.csr_matrix:
        rows, cols, vals = self._triplets(a)
        shape = (self.cfg.det_count, self.cfg.width * self.cfg.height)
        m = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
        m.sum_duplicates()
        return m

    def block(self, a: int) -> sp.csr_matrix:
        return self._blocks[a] if self._blocks is not None else self._block(a)

    # -- array-level maps (image array (H, W) <-> sinogram array (K, D)) --

    def forward(self, x: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        x = np.asarray(x, dtype=float)
        if x.shape != cfg.image_shape:
            raise ValueError(f"image shape {x.shape} does not match projector {cfg.image_shape}")
        flat = x.ravel()
        if self._matrix is not None:
            return (self._matrix @ flat).reshape(cfg.sino_shape)
        m = self._margin
        padded = np.pad(x, m).ravel()
        out = np.empty(cfg.sino_shape)
        for sl, idx, w in self._samples():
            out[sl] = np.einsum("akcn,akcn->ak", padded[idx], w)
        return out

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        y = np.asarray(y, dtype=float)
        if y.shape != cfg.sino_shape:
            raise ValueError(f"sinogram shape {y.shape} does not match projector {cfg.sino_shape}")
        if self._matrix is not None:
            return (self._matrix_t @ y.ravel()).reshape(cfg.image_shape)
        m = self._margin
        ph, pw = cfg.height + 2 * m, cfg.width + 2 * m
        out = np.zeros(ph * pw)
        for sl, idx, w in self._samples():
            out += np.bincount(idx.ravel(), (w * y[sl][:, :, None, None]).ravel(), ph * pw)
        return out.reshape(ph, pw)[m:m + cfg.height, m:m + cfg.width].copy()

    def _samples(self, chunk: int = 4):
        """Yield (view slice, padded-image indices, weights) per chunk of views.

        Indices address the image zero-padded by ``self._margin`` pixels, wide
        enough that every sample and its four corners land inside; corners in
        the margin read (and receive) zeros. Shapes are (views, det, 4, steps).
        """
        cfg = self.cfg
        m = self._margin
        pw = cfg.width + 2 * m
        r = self._r[None, :, None] / cfg.spacing
        t = self._t[None, None, :] / cfg.spacing
        ci = (cfg.width - 1) / 2 + m
        cj = (cfg.height - 1) / 2 + m
        for start in range(0, cfg.views, chunk):
            theta = cfg.angle_set.angles[start:start + chunk][:, None, None]
            c, s = np.cos(theta), np.sin(theta)
            fi = (r * c + ci) - t * s
            fj = (r * s + cj) + t * c
            i0 = fi.astype(np.int64)
            j0 = fj.astype(np.int64)
            wx = fi - i0
            wy = fj - j0
            base = j0 * pw + i0
            idx = np.empty(base.shape[:2] + (4,) + base.shape[2:], dtype=np.int64)
            idx[:, :, 0] = base
            idx[:, :, 1] = base + 1
            idx[:, :, 2] = base + pw
            idx[:, :, 3] = base + (pw + 1)
            w = np.empty(idx.shape)
            ux = 1 - wx
            uy = (1 - wy) * self._step
            wy *= self._step
            np.multiply(ux, uy, out=w[:, :, 0])
            np.multiply(wx, uy, out=w[:, :, 1])
            np.multiply(ux, wy, out=w[:, :, 2])
            np.multiply(wx, wy, out=w[:, :, 3])
            yield slice(start, start + chunk), idx, w

    def row_sums(self) -> np.ndarray:
        """Per-ray sum of interpolation weights times step length, shape (K, D)."""
        return self.forward(np.ones(self.cfg.image_shape))

    def norm_sq(self, iterations: int = 20) -> float:
        """Power-iteration estimate of the largest eigenvalue of A^T A."""
        if self._norm_sq is None:
            v = np.ones(self.cfg.image_shape)
            v /= np.linalg.norm(v)
            lam = 0.0
            for _ in range(iterations):
                w = self.adjoint(self.forward(v))
                lam = float(np.linalg.norm(w))
                if lam == 0:
                    break
                v = w / lam
            self._norm_sq = lam
        return self._norm_sq


_REGISTRY: dict[tuple, Projector] = {}


def get_projector(cfg: ProjectorConfig) -> Projector:
    """Weight tables are built once per distinct configuration (small FIFO cache)."""
    key = cfg.key()
    proj = _REGISTRY.get(key)
    if proj is None:
        if len(_REGISTRY) >= 32:
            _REGISTRY.pop(next(iter(_REGISTRY)))
        proj = _REGISTRY[key] = Projector(cfg)
    return proj


def _check_image(cfg: ProjectorConfig, img: Image) -> None:
    if img.shape != cfg.image_shape:
        raise ValueError(f"image {img.shape} does not match config {cfg.image_shape}")
    if not math.isclose(img.spacing, cfg.spacing, rel_tol=1e-12):
        raise ValueError("image spacing does not match config")


def forward(cfg: ProjectorConfig, img: Image) -> Sinogram:
    _check_image(cfg, img)
    return Sinogram(cfg.angle_set, get_projector(cfg).forward(img.values), cfg.det_spacing)


def adjoint(cfg: ProjectorConfig, sino: Sinogram) -> Image:
    if sino.values.shape != cfg.sino_shape:
        raise ValueError(f"sinogram {sino.values.shape} does not match config {cfg.sino_shape}")
    if not np.array_equal(sino.angles, cfg.angle_set.angles):
        raise ValueError("sinogram angles do not match config")
    return Image(get_projector(cfg).adjoint(sino.values), cfg.spacing)


# -- Fourier slice ------------------------------------------------------------

def centered_spectrum_1d(rows: np.ndarray, spacing: float, n_fft: int):
    """Continuous-FT samples of centered 1D signals; returns (freqs, spectrum)."""
    n = rows.shape[-1]
    m = np.fft.fftfreq(n_fft) * n_fft
    c = (n - 1) / 2
    spec = np.fft.fft(rows, n=n_fft, axis=-1) * np.exp(2j * np.pi * m * c / n_fft) * spacing
    return m / (n_fft * spacing), spec


def centered_spectrum_2d(img: np.ndarray, spacing: float, n_fft: int):
    """Continuous-FT samples of a centered image on an fftshifted square grid."""
    h, w = img.shape
    m = np.fft.fftfreq(n_fft) * n_fft
    px = np.exp(2j * np.pi * m * ((w - 1) / 2) / n_fft)
    py = np.exp(2j * np.pi * m * ((h - 1) / 2) / n_fft)
    spec = np.fft.fft2(img, s=(n_fft, n_fft)) * py[:, None] * px[None, :] * spacing ** 2
    return np.fft.fftshift(m) / (n_fft * spacing), np.fft.fftshift(spec)


def _bilinear_complex(grid_f: np.ndarray, spec: np.ndarray, fx: np.ndarray, fy: np.ndarray):
    df = grid_f[1] - grid_f[0]
    gi = (fx - grid_f[0]) / df
    gj = (fy - grid_f[0]) / df
    i0 = np.clip(np.floor(gi).astype(int), 0, len(grid_f) - 2)
    j0 = np.clip(np.floor(gj).astype(int), 0, len(grid_f) - 2)
    tx, ty = gi - i0, gj - j0
    return ((1 - tx) * (1 - ty) * spec[j0, i0] + tx * (1 - ty) * spec[j0, i0 + 1]
            + (1 - tx) * ty * spec[j0 + 1, i0] + tx * ty * spec[j0 + 1, i0 + 1])


def fourier_slice_check(cfg: ProjectorConfig, img: Image, band: float = 0.25,
                        pad: int = 4) -> dict:
    """Compare projection spectra with polar slices of the 2D image spectrum.

    ``maxRelError`` is the largest deviation over ``|omega| <= band * Nyquist``
    divided by the peak magnitude of the 2D spectrum.
    """
    _check_image(cfg, img)
    if cfg.width != cfg.height:
        raise ValueError("fourier slice check requires a square image")
    sino = get_projector(cfg).forward(img.values)
    n_fft = pad * max(cfg.width, cfg.det_count)
    freqs, row_spec = centered_spectrum_1d(sino, cfg.det_spacing, n_fft)
    grid_f, spec2 = centered_spectrum_2d(img.values, cfg.spacing, pad * cfg.width)
    peak = float(np.max(np.abs(spec2)))
    nyquist = 0.5 / cfg.spacing
    sel = np.abs(freqs) <= band * nyquist
    om = freqs[sel]
    th = cfg.angle_set.angles[:, None]
    slices = _bilinear_complex(grid_f, spec2, om[None, :] * np.cos(th), om[None, :] * np.sin(th))
    err = np.abs(row_spec[:, sel] - slices)
    max_rel = float(err.max() / peak) if peak > 0 else 0.0
    return {"maxRelError": max_rel, "peak": peak, "frequencies": int(sel.sum())}
