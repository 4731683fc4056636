"""Discrete-continuous (DISCO) convolutions.

A kernel is a continuous function on the normalized domain ``[0, 1]^2``,
written as a linear combination of fixed piecewise-linear basis functions.
:func:`discretize` tabulates the basis at the offsets between output and
input sample points (times the input cell area) for a concrete pair of grids,
so the same coefficients can be applied at any resolution.

Grid tensors are ``(channels, n0, n1)`` arrays. For sinograms axis 0 is the
view angle and axis 1 the detector offset; for images axis 0 is y, axis 1 x.
Offsets are measured in normalized units; the basis polar angle is taken from
the axis-0 direction, ``psi = atan2(d1, d0)``, so negating the axis-1 offset
maps ``psi -> -psi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp


class Padding(str, Enum):
    ZERO = "zero"
    REFLECT = "reflect"
    CIRCULAR = "circular"
    FLIPPED = "flipped_circular_theta"


def _as_modes(modes) -> tuple[Padding, ...]:
    if isinstance(modes, (str, Padding)):
        modes = (modes,)
    return tuple(Padding(m) for m in modes)


def axis_source(k: np.ndarray, n: int, mode: Padding):
    """Map virtual indices ``k`` along an axis of length ``n`` to sources.

    Returns ``(src, valid, flipped)``; ``flipped`` marks rows that wrapped an
    odd number of times under flipped-circular padding.
    """
    k = np.asarray(k)
    flipped = np.zeros(k.shape, dtype=bool)
    if mode is Padding.ZERO:
        valid = (k >= 0) & (k < n)
        return np.where(valid, k, 0), valid, flipped
    valid = np.ones(k.shape, dtype=bool)
    if mode is Padding.CIRCULAR:
        return np.mod(k, n), valid, flipped
    if mode is Padding.FLIPPED:
        return np.mod(k, n), valid, (np.floor_divide(k, n) % 2).astype(bool)
    if mode is Padding.REFLECT:
        if n == 1:
            return np.zeros_like(k), valid, flipped
        period = 2 * n - 2
        m = np.mod(k, period)
        return np.where(m >= n, period - m, m), valid, flipped
    raise ValueError(f"unknown padding {mode}")


def source_index(shape: tuple[int, int], modes, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Flat source index for virtual (row, col) positions; -1 where padding is zero."""
    mode0, mode1 = _as_modes(modes)
    if mode1 is Padding.FLIPPED:
        raise ValueError("flipped circular padding applies only to the theta (first) axis")
    n0, n1 = shape
    r_src, r_ok, flip = axis_source(rows, n0, mode0)
    c_src, c_ok, _ = axis_source(cols, n1, mode1)
    c_src = np.where(flip, n1 - 1 - c_src, c_src)
    return np.where(r_ok & c_ok, r_src * n1 + c_src, -1)


def pad(tensor: np.ndarray, modes, margins) -> np.ndarray:
    """Pad the trailing ``len(modes)`` axes (one or two) of ``tensor``.

    ``flipped_circular_theta`` wraps the first padded axis and reverses the
    second axis of every wrapped row.
    """
    modes = _as_modes(modes)
    margins = (margins,) * len(modes) if np.isscalar(margins) else tuple(margins)
    if len(margins) != len(modes) or len(modes) not in (1, 2):
        raise ValueError("one mode and one margin per padded axis (1 or 2 axes)")
    tensor = np.asarray(tensor)
    dims = tensor.shape[-len(modes):]
    for n, m, mode in zip(dims, margins, modes):
        limit = n - 1 if mode is Padding.REFLECT else n
        if m < 0 or m > limit:
            raise ValueError(f"margin {m} too large for axis of length {n} ({mode.value})")
    if len(modes) == 1:
        if modes[0] is Padding.FLIPPED:
            raise ValueError("flipped circular padding needs a (theta, r) pair of axes")
        src, ok, _ = axis_source(np.arange(-margins[0], dims[0] + margins[0]), dims[0], modes[0])
        out = tensor[..., src]
        return np.where(ok, out, 0)
    (n0, n1), (m0, m1) = dims, margins
    rows = np.arange(-m0, n0 + m0)[:, None]
    cols = np.arange(-m1, n1 + m1)[None, :]
    idx = source_index((n0, n1), modes, rows, cols)
    flat = tensor.reshape(tensor.shape[:-2] + (n0 * n1,))
    out = flat[..., np.where(idx >= 0, idx, 0)]
    return np.where(idx >= 0, out, 0)


# -- kernel basis -------------------------------------------------------------

@dataclass(frozen=True)
class KernelBasis:
    cutoff: float = 0.02
    rings: int = 5
    per_ring: int = 7

    def __post_init__(self):
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")
        if self.rings < 0 or self.per_ring < 1:
            raise ValueError("rings must be >= 0 and per_ring >= 1")

    @property
    def total(self) -> int:
        return 1 + self.rings * self.per_ring

    @property
    def ring_width(self) -> float:
        return self.cutoff / max(self.rings, 1)

    def index(self, ring: int, slot: int) -> int:
        return 1 + (ring - 1) * self.per_ring + slot

    def evaluate(self, d0, d1) -> np.ndarray:
        """All basis functions at offsets ``(d0, d1)``; shape ``offsets.shape + (total,)``."""
        d0 = np.asarray(d0, dtype=float)
        d1 = np.asarray(d1, dtype=float)
        rho = np.hypot(d0, d1)
        psi = np.arctan2(d1, d0)
        inside = rho <= self.cutoff
        width = self.ring_width
        out = np.zeros(rho.shape + (self.total,))
        out[..., 0] = np.maximum(0.0, 1 - rho / width) * inside
        if self.rings:
            ang_width = 2 * math.pi / self.per_ring
            for k in range(1, self.rings + 1):
                radial = np.maximum(0.0, 1 - np.abs(rho - k * width) / width) * inside
                for m in range(self.per_ring):
                    dist = np.abs(np.angle(np.exp(1j * (psi - m * ang_width))))
                    out[..., self.index(k, m)] = radial * np.maximum(0.0, 1 - dist / ang_width)
        return out

    def evaluate_polar(self, radius, angle) -> np.ndarray:
        return self.evaluate(np.asarray(radius) * np.cos(angle), np.asarray(radius) * np.sin(angle))

    def integrals(self) -> np.ndarray:
        """Exact integral of every basis function over the plane."""
        w = self.ring_width
        out = np.empty(self.total)
        out[0] = math.pi * w * w / 3 if self.rings else math.pi * self.cutoff ** 2 / 3
        for k in range(1, self.rings + 1):
            radial = k * w * w if k < self.rings else k * w * w / 2 - w * w / 6
            for m in range(self.per_ring):
                out[self.index(k, m)] = radial * 2 * math.pi / self.per_ring
        return out

    def mirror_slots(self) -> np.ndarray:
        """Permutation sending each basis to its partner under ``psi -> -psi``."""
        perm = np.arange(self.total)
        for k in range(1, self.rings + 1):
            for m in range(self.per_ring):
                perm[self.index(k, m)] = self.index(k, (-m) % self.per_ring)
        return perm

    def scaled(self, factor: float) -> "KernelBasis":
        return KernelBasis(self.cutoff * factor, self.rings, self.per_ring)


def build_basis(cutoff: float = 0.02, rings: int = 5, per_ring: int = 7) -> KernelBasis:
    return KernelBasis(cutoff, rings, per_ring)


def symmetrize(coeffs: np.ndarray, basis: KernelBasis) -> np.ndarray:
    """Average coefficients with their mirror slots (kernel even in the axis-1 offset)."""
    coeffs = np.asarray(coeffs, dtype=float)
    return 0.5 * (coeffs + coeffs[..., basis.mirror_slots()])


@dataclass(frozen=True, eq=False)
class DiscoKernel:
    basis: KernelBasis
    coeffs: np.ndarray  # (out_channels, in_channels, total) or (total,)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape[-1] != self.basis.total:
            raise ValueError("coefficient vector length must equal basis size")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    def __call__(self, d0, d1):
        return self.basis.evaluate(d0, d1) @ self.coeffs.reshape(-1, self.basis.total).T


# -- discretization -----------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform grid on the normalized domain; ``pitch`` defaults to ``1/n``."""
    shape: tuple[int, int]
    pitch: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if self.pitch is None:
            object.__setattr__(self, "pitch", tuple(1.0 / n for n in self.shape))
        else:
            object.__setattr__(self, "pitch", tuple(float(p) for p in self.pitch))

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def cell_area(self) -> float:
        return self.pitch[0] * self.pitch[1]


@dataclass(eq=False)
class DiscreteOperator:
    """Basis-resolved weight table of a DISCO layer on a pair of grids.

    ``index[i, s]`` is the flat input index of stencil slot ``s`` of output
    ``i`` (-1: no contribution). ``values`` holds ``kappa_l(u_j - v_i) * q_j``
    (already divided by ``norm`` when normalized), shape ``(S, L)`` when the
    stencil is shared by every output, else ``(N_out, S, L)``.
    """
    in_grid: Grid
    out_grid: Grid
    index: np.ndarray
    values: np.ndarray
    offsets: np.ndarray  # (S, 2) normalized offsets for shared stencils, else (N_out, S, 2)
    basis: KernelBasis
    shifts: np.ndarray | None = None  # (S, 2) integer offsets of a shared stencil
    padding: tuple[Padding, Padding] = (Padding.ZERO, Padding.ZERO)
    _scatter: sp.csr_matrix | None = field(default=None, repr=False)
    _plan: tuple | None = field(default=None, repr=False)

    @property
    def shared(self) -> bool:
        return self.values.ndim == 2

    @property
    def support(self) -> int:
        return self.index.shape[1]

    def weights(self, coeffs: np.ndarray) -> sp.csr_matrix:
        """Sparse ``(N_out, N_in)`` table for a single coefficient vector."""
        coeffs = np.asarray(coeffs, dtype=float).reshape(-1)
        w = self.values @ coeffs
        w = np.broadcast_to(w, self.index.shape)
        rows = np.broadcast_to(np.arange(self.index.shape[0])[:, None], self.index.shape)
        ok = self.index >= 0
        m = sp.coo_matrix((w[ok], (rows[ok], self.index[ok])),
                          shape=(self.out_grid.size, self.in_grid.size)).tocsr()
        m.sum_duplicates()
        return m

    def scatter(self) -> sp.csr_matrix:
        """0/1 matrix adding stencil contributions back onto input points."""
        if self._scatter is None:
            n_out, s = self.index.shape
            idx = self.index.ravel()
            ok = idx >= 0
            cols = np.arange(n_out * s)[ok]
            self._scatter = sp.csr_matrix((np.ones(ok.sum()), (idx[ok], cols)),
                                          shape=(self.in_grid.size, n_out * s))
        return self._scatter

    def plan(self):
        """Padded-grid source index and its fold-back matrix (shared stencils)."""
        if self._plan is None:
            n0, n1 = self.in_grid.shape
            r0, r1 = (int(np.abs(self.shifts[:, a]).max()) for a in (0, 1))
            rows = np.arange(-r0, n0 + r0)[:, None]
            cols = np.arange(-r1, n1 + r1)[None, :]
            pidx = source_index((n0, n1), self.padding, rows, cols)
            ok = (pidx >= 0).ravel()
            fold = sp.csr_matrix((np.ones(ok.sum()), (pidx.ravel()[ok], np.flatnonzero(ok))),
                                 shape=(n0 * n1, pidx.size))
            self._plan = (np.where(pidx >= 0, pidx, n0 * n1), fold, r0, r1)
        return self._plan


def _stencil(grid: Grid, cutoff: float):
    r0 = math.floor(cutoff / grid.pitch[0] + 1e-9)
    r1 = math.floor(cutoff / grid.pitch[1] + 1e-9)
    k0, k1 = np.meshgrid(np.arange(-r0, r0 + 1), np.arange(-r1, r1 + 1), indexing="ij")
    d0 = k0.ravel() * grid.pitch[0]
    d1 = k1.ravel() * grid.pitch[1]
    keep = np.hypot(d0, d1) <= cutoff
    return k0.ravel()[keep], k1.ravel()[keep], np.stack([d0[keep], d1[keep]], axis=1)


def discretize(basis: KernelBasis | DiscoKernel, in_grid: Grid, out_grid: Grid | None = None,
               padding=(Padding.ZERO, Padding.ZERO), normalize: bool = False) -> DiscreteOperator:
    """Tabulate the basis for ``in_grid -> out_grid`` under the given padding.

    With ``normalize`` every basis column is divided by its discrete quadrature
    sum over an unbounded grid of the same pitch, so each basis function
    integrates to one at every resolution it is resolved on.
    """
    if isinstance(basis, DiscoKernel):
        basis = basis.basis
    out_grid = in_grid if out_grid is None else out_grid
    padding = _as_modes(padding)
    n0, n1 = out_grid.shape
    if in_grid == out_grid:
        k0, k1, offs = _stencil(in_grid, basis.cutoff)
        values = basis.evaluate(offs[:, 0], offs[:, 1]) * in_grid.cell_area
        rows = np.arange(n0)[:, None, None] + k0[None, None, :]
        cols = np.arange(n1)[None, :, None] + k1[None, None, :]
        index = source_index(in_grid.shape, padding, rows, cols).reshape(n0 * n1, -1)
        if normalize:
            values = values / _norms(values)
        return DiscreteOperator(in_grid, out_grid, index, values, offs, basis,
                                np.stack([k0, k1], axis=1), padding)
    # general case: per-output stencils between different grids
    v0 = (np.arange(n0) + 0.5) * out_grid.pitch[0]
    v1 = (np.arange(n1) + 0.5) * out_grid.pitch[1]
    p0, p1 = in_grid.pitch
    w0 = math.ceil(basis.cutoff / p0) + 1
    w1 = math.ceil(basis.cutoff / p1) + 1
    c0 = np.floor(v0 / p0 - 0.5).astype(int)
    c1 = np.floor(v1 / p1 - 0.5).astype(int)
    k0 = c0[:, None] + np.arange(-w0, w0 + 2)[None, :]          # (n0, A)
    k1 = c1[:, None] + np.arange(-w1, w1 + 2)[None, :]          # (n1, B)
    d0 = (k0 + 0.5) * p0 - v0[:, None]
    d1 = (k1 + 0.5) * p1 - v1[:, None]
    D0 = d0[:, None, :, None] + 0 * d1[None, :, None, :]
    D1 = d1[None, :, None, :] + 0 * d0[:, None, :, None]
    K0 = k0[:, None, :, None] + 0 * k1[None, :, None, :]
    K1 = k1[None, :, None, :] + 0 * k0[:, None, :, None]
    shape = (n0 * n1, -1)
    D0, D1, K0, K1 = (a.reshape(shape) for a in (D0, D1, K0, K1))
    index = source_index(in_grid.shape, padding, K0, K1)
    index = np.where(np.hypot(D0, D1) <= basis.cutoff, index, -1)
    values = basis.evaluate(D0, D1) * in_grid.cell_area
    if normalize:
        values = values / _norms(_stencil_values(basis, in_grid))
    return DiscreteOperator(in_grid, out_grid, index, values, np.stack([D0, D1], -1), basis,
                            padding=padding)


def _stencil_values(basis: KernelBasis, grid: Grid) -> np.ndarray:
    _, _, offs = _stencil(grid, basis.cutoff)
    return basis.evaluate(offs[:, 0], offs[:, 1]) * grid.cell_area


def _norms(values: np.ndarray) -> np.ndarray:
    s = values.sum(axis=0)
    return np.where(s > 0, s, 1.0)


# -- application --------------------------------------------------------------

def _gather(op: DiscreteOperator, x: np.ndarray) -> np.ndarray:
    """Stencil columns ``(N_out, S, C_in)``; padded-zero slots read a zero."""
    c = x.shape[0]
    flat = x.reshape(c, -1)
    ext = np.concatenate([flat, np.zeros((c, 1))], axis=1).T   # (N_in + 1, C)
    idx = np.where(op.index >= 0, op.index, flat.shape[1])
    return ext[idx]


def _as_channels(x: np.ndarray, grid: Grid) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != grid.shape:
        raise ValueError(f"input grid {x.shape[1:]} does not match operator grid {grid.shape}")
    return x


def _coeff_tensor(coeffs: np.ndarray, c_in: int, total: int) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.ndim == 1:
        if c_in != 1:
            raise ValueError("a single coefficient vector needs a single input channel")
        coeffs = coeffs[None, None]
    if coeffs.shape[1:] != (c_in, total):
        raise ValueError(f"coefficients {coeffs.shape} incompatible with {c_in} input channels")
    return coeffs


def _columns(op: DiscreteOperator, x: np.ndarray) -> np.ndarray:
    """Shifted copies ``(S, C, n0, n1)`` of the padded input, one per stencil slot."""
    pidx, _, r0, r1 = op.plan()
    c = x.shape[0]
    n0, n1 = op.in_grid.shape
    ext = np.concatenate([x.reshape(c, -1), np.zeros((c, 1))], axis=1)
    xp = ext[:, pidx]
    cols = np.empty((len(op.shifts), c, n0, n1))
    for s, (a, b) in enumerate(op.shifts):
        cols[s] = xp[:, r0 + a:r0 + a + n0, r1 + b:r1 + b + n1]
    return cols


def apply(op: DiscreteOperator, x: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """``out[o, i] = sum_{c, j} w_{oc}(i, j) x[c, j]``; returns ``(C_out, n0, n1)``."""
    x = _as_channels(x, op.in_grid)
    c_in = x.shape[0]
    coeffs = _coeff_tensor(coeffs, c_in, op.basis.total)
    c_out = coeffs.shape[0]
    if op.shared:
        cols = _columns(op, x)
        w = np.einsum("sl,oil->osi", op.values, coeffs).reshape(c_out, -1)
        out = w @ cols.reshape(w.shape[1], -1)
        return out.reshape((c_out,) + op.out_grid.shape)
    cols = _gather(op, x)                                         # (N, S, C)
    n = cols.shape[0]
    z = np.einsum("nsc,nsl->ncl", cols, op.values).reshape(n, -1)
    out = z @ coeffs.reshape(c_out, -1).T
    return out.T.reshape((c_out,) + op.out_grid.shape)


def apply_vjp(op: DiscreteOperator, x: np.ndarray, coeffs: np.ndarray, g: np.ndarray):
    """Gradients of ``<g, apply(op, x, coeffs)>`` w.r.t. ``x`` and ``coeffs``."""
    if not op.shared:
        raise NotImplementedError("gradients are implemented for shared stencils")
    x = _as_channels(x, op.in_grid)
    c_in = x.shape[0]
    coeffs = _coeff_tensor(coeffs, c_in, op.basis.total)
    c_out = coeffs.shape[0]
    cols = _columns(op, x)
    s_count = cols.shape[0]
    n0, n1 = op.in_grid.shape
    go = np.asarray(g, dtype=float).reshape(c_out, -1)
    gw = (go @ cols.reshape(s_count * c_in, -1).T).reshape(c_out, s_count, c_in)
    g_coeffs = np.einsum("sl,osi->oil", op.values, gw)
    w = np.einsum("sl,oil->osi", op.values, coeffs).reshape(c_out, -1)
    g_cols = (w.T @ go).reshape(s_count, c_in, n0, n1)
    pidx, fold, r0, r1 = op.plan()
    g_pad = np.zeros((c_in,) + pidx.shape)
    for s, (a, b) in enumerate(op.shifts):
        g_pad[:, r0 + a:r0 + a + n0, r1 + b:r1 + b + n1] += g_cols[s]
    g_x = fold @ g_pad.reshape(c_in, -1).T                           # (N_in, C_in)
    return g_x.T.reshape(x.shape), g_coeffs
