"""Property-verification suites: adjoint, equivariance, Fourier slice, DISCO, gradients.

Each suite runs at fixed seeds and returns :class:`Check` records holding the
measured value next to its tolerance. ``run`` aggregates suites; the CLI
``verify`` command exits 0 iff every check passes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import disco
from .core import AngleSet, Image, Sinogram, make_rng
from .model import (CtoConfig, Graph, cto_forward, init_params, isotropic_params,
                    loss_and_grads, nos_forward, symmetrize_params)
from .phantom import random_phantom, rasterize, shepp_logan
from .projector import ProjectorConfig, fourier_slice_check, get_projector

SUITES = ("adjoint", "equivariance", "slice", "disco", "gradcheck")


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    value: float
    tolerance: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.note})" if self.note else ""
        return f"{status} {self.suite}.{self.name} value={self.value:.6g} limit={self.tolerance:g}{extra}"


def _below(suite, name, value, tol, note="") -> Check:
    return Check(suite, name, float(value), tol, bool(value < tol), note)


def _above(suite, name, value, tol, note="") -> Check:
    return Check(suite, name, float(value), tol, bool(value >= tol), note)


def theta_shift(values: np.ndarray, shift: int) -> np.ndarray:
    """Shift ``(..., n_theta, n_r)`` data by ``shift`` rows over a pi period.

    Rows that wrap around come back reversed along r, as a parallel-beam
    sinogram does: ``p(theta + pi, r) = p(theta, -r)``.
    """
    # written out independently of the padding code so that it can referee it
    n0 = values.shape[-2]
    src = np.arange(n0) - shift
    wraps = np.floor_divide(src, n0)
    out = values[..., np.mod(src, n0), :].copy()
    odd = wraps % 2 == 1
    out[..., odd, :] = out[..., odd, ::-1]
    return out


# -- suites -------------------------------------------------------------------

def suite_adjoint(seed: int = 0, pairs: int = 20) -> list[Check]:
    cfg = ProjectorConfig(64, 64, AngleSet.uniform_views(45), 96)
    op = get_projector(cfg)
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        x = rng.standard_normal(cfg.image_shape)
        y = rng.standard_normal(cfg.sino_shape)
        lhs = float(np.vdot(op.forward(x), y))
        rhs = float(np.vdot(x, op.adjoint(y)))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    return [_below("adjoint", "dot_product_rel_error", worst, 1e-12, f"{pairs} pairs")]


def suite_equivariance(seed: int = 0) -> list[Check]:
    rng = make_rng(seed)
    out = []
    basis = disco.KernelBasis(0.15, 3, 6)
    coeffs = rng.standard_normal((2, 3, basis.total))
    x = rng.standard_normal((3, 16, 24))

    op = disco.discretize(basis, disco.Grid((16, 24)), padding=("circular", "circular"))
    lhs = disco.apply(op, np.roll(x, (3, -5), axis=(1, 2)), coeffs)
    rhs = np.roll(disco.apply(op, x, coeffs), (3, -5), axis=(1, 2))
    out.append(_below("equivariance", "circular_shift", np.max(np.abs(lhs - rhs)), 1e-12))

    op = disco.discretize(basis, disco.Grid((16, 24)), padding=("flipped_circular_theta", "reflect"))
    sym = disco.symmetrize(coeffs, basis)
    worst = 0.0
    for s in (1, 5, 16, 21):
        lhs = disco.apply(op, theta_shift(x, s), sym)
        rhs = theta_shift(disco.apply(op, x, sym), s)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    out.append(_below("equivariance", "flipped_theta_shift", worst, 1e-12, "r-symmetric kernels"))

    cfg = CtoConfig()
    params = symmetrize_params(init_params(cfg, seed), cfg)
    params = _random_biases(params, rng)
    sino = Sinogram(AngleSet.uniform_views(60), rng.standard_normal((60, cfg.det_count)),
                    cfg.det_spacing)
    base = nos_forward(params, sino, cfg).values
    worst = 0.0
    for s in (4, 28):
        shifted = nos_forward(params, sino.with_values(theta_shift(sino.values, s)), cfg).values
        worst = max(worst, float(np.max(np.abs(shifted - theta_shift(base, s)))))
    out.append(_below("equivariance", "nos_theta_shift", worst, 1e-10, "60 views, shifts 4 and 28"))

    # the identity behind flipped padding: p(theta + pi, r) = p(theta, -r)
    full = ProjectorConfig(128, 128, AngleSet.uniform_views(360, 2 * np.pi), 192)
    sl = rasterize(shepp_logan(64.0), 128, 128, 1.0)
    p = get_projector(full).forward(sl.values)
    out.append(_below("equivariance", "pi_flip", np.max(np.abs(p[180:] - p[:180, ::-1])), 1e-6,
                      "Shepp-Logan, 360 views over 2 pi"))

    # 90-degree rotation of the object: theta shift by half the views, image rot90
    params = isotropic_params(params)
    img = rasterize(random_phantom(make_rng(seed + 1)), 64, 64, cfg.spacing)
    rec = cto_forward(params, _project(img, cfg, 60), cfg).values
    rot = Image(np.rot90(img.values), cfg.spacing)
    rec_rot = cto_forward(params, _project(rot, cfg, 60), cfg).values
    out.append(_below("equivariance", "cto_rot90", np.max(np.abs(rec_rot - np.rot90(rec))), 1e-6,
                      "isotropic image kernels"))
    return out


def suite_slice(seed: int = 0, sigma: float = 8.0) -> list[Check]:
    n = 128
    cfg = ProjectorConfig(n, n, AngleSet.uniform_views(180), 192)
    xs = np.arange(n) - (n - 1) / 2
    blob = np.exp(-(xs[None, :] ** 2 + xs[:, None] ** 2) / (2 * sigma ** 2))
    res = fourier_slice_check(cfg, Image(blob, 1.0), band=0.25)
    return [_below("slice", "max_rel_error", res["maxRelError"], 0.05,
                   f"{res['frequencies']} frequencies, |w| <= 0.25 Nyquist")]


def _smooth(c0, c1, width: float = 0.1):
    return np.exp(-((c0 - 0.5) ** 2 + (c1 - 0.5) ** 2) / (2 * width ** 2))


def continuous_disco(basis: disco.KernelBasis, coeffs: np.ndarray, out_size: int,
                     fine: int = 400) -> np.ndarray:
    """Continuous convolution of ``_smooth`` with the kernel, by fine midpoint quadrature."""
    h = 2 * basis.cutoff / fine
    d = (np.arange(fine) + 0.5) * h - basis.cutoff
    d0, d1 = np.meshgrid(d, d, indexing="ij")
    kern = basis.evaluate(d0.ravel(), d1.ravel()) @ coeffs
    keep = kern != 0
    kern, d0, d1 = kern[keep] * h * h, d0.ravel()[keep], d1.ravel()[keep]
    v = (np.arange(out_size) + 0.5) / out_size
    out = np.empty((out_size, out_size))
    for i in range(out_size):
        vals = _smooth(v[i] + d0[None, :], v[:, None] + d1[None, :])
        out[i] = vals @ kern
    return out


def disco_convergence(levels=(32, 64, 128), out_size: int = 32, cutoff: float = 0.1,
                      seed: int = 0) -> list[float]:
    """Max deviation of DISCO outputs on an ``out_size`` grid from the continuous integral."""
    basis = disco.KernelBasis(cutoff, 3, 6)
    coeffs = make_rng(seed).standard_normal(basis.total)
    out_grid = disco.Grid((out_size, out_size))
    ref = continuous_disco(basis, coeffs, out_size)
    errs = []
    for n in levels:
        c = (np.arange(n) + 0.5) / n
        op = disco.discretize(basis, disco.Grid((n, n)), out_grid)
        out = disco.apply(op, _smooth(c[:, None], c[None, :]), coeffs)[0]
        errs.append(float(np.max(np.abs(out - ref))))
    return errs


def suite_disco(seed: int = 0) -> list[Check]:
    out = []
    errs = disco_convergence(seed=seed)
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    out.append(_above("disco", "convergence_ratio", min(ratios), 1.5,
                      "errors " + ", ".join(f"{e:.3g}" for e in errs)))

    rng = make_rng(seed)
    basis = disco.KernelBasis(0.2, 2, 5)
    op = disco.discretize(basis, disco.Grid((12, 10)), padding=("flipped_circular_theta", "reflect"))
    x = rng.standard_normal((2, 12, 10))
    c = rng.standard_normal((3, 2, basis.total))
    g = rng.standard_normal((3, 12, 10))
    gx, gc = disco.apply_vjp(op, x, c, g)
    dx = rng.standard_normal(x.shape)
    dc = rng.standard_normal(c.shape)
    # apply is bilinear, so central differences are exact up to rounding
    h = 1e-3
    fd = (np.vdot(g, disco.apply(op, x + h * dx, c + h * dc))
          - np.vdot(g, disco.apply(op, x - h * dx, c - h * dc))) / (2 * h)
    an = np.vdot(gx, dx) + np.vdot(gc, dc)
    out.append(_below("disco", "vjp_rel_error", abs(fd - an) / abs(an), 1e-9))
    return out


def _random_biases(params: dict, rng: np.random.Generator, scale: float = 0.05) -> dict:
    """Non-zero biases keep relu inputs away from exact zeros."""
    out = dict(params)
    for name, v in params.items():
        if name.endswith(".mix_b"):
            out[name] = rng.uniform(-scale, scale, v.shape)
    return out


def _project(img: Image, cfg: CtoConfig, views: int) -> Sinogram:
    proj = ProjectorConfig(img.width, img.height, AngleSet.uniform_views(views), cfg.det_count,
                           img.spacing, cfg.det_spacing, cfg.step_fraction)
    return Sinogram(proj.angle_set, get_projector(proj).forward(img.values), cfg.det_spacing)


def gradcheck(seed: int = 0, samples: int = 20, views: int = 15, step: float = 1e-5,
              floor: float = 1e-6) -> dict:
    """Central finite differences against the tape gradient for sampled parameters."""
    cfg = CtoConfig()
    rng = make_rng(seed)
    params = _random_biases(init_params(cfg, seed), rng)
    img = rasterize(random_phantom(make_rng(seed + 1)), 64, 64, cfg.spacing)
    sino = _project(img, cfg, views)
    _, grads = loss_and_grads(params, sino, img, cfg)
    # sample among entries whose gradient clears the finite-difference noise floor
    # (dead relu paths give exact zeros, which a difference quotient cannot resolve)
    top = max(float(np.max(np.abs(g))) for g in grads.values())
    live = [(name, int(i)) for name in sorted(params)
            for i in np.flatnonzero(np.abs(np.asarray(grads[name]).reshape(-1)) >= floor * top)]
    picks = [live[int(k)] for k in rng.choice(len(live), size=min(samples, len(live)),
                                               replace=False)]
    worst, rows = 0.0, []
    for name, flat in picks:
        base = np.array(params[name], dtype=float)
        vals = []
        for sign in (1, -1):
            pert = base.copy().reshape(-1)
            pert[flat] += sign * step
            trial = dict(params)
            trial[name] = pert.reshape(base.shape)
            vals.append(loss_and_grads_value(trial, sino, img, cfg))
        fd = (vals[0] - vals[1]) / (2 * step)
        an = float(np.asarray(grads[name]).reshape(-1)[flat])
        denom = max(abs(fd), abs(an), 1e-12)
        rel = abs(fd - an) / denom
        worst = max(worst, rel)
        rows.append((f"{name}[{flat}]", fd, an, rel))
    return {"max_rel_error": worst, "rows": rows, "candidates": len(live)}


def loss_and_grads_value(params: dict, sino: Sinogram, target: Image, cfg: CtoConfig) -> float:
    g = Graph(params)
    out = g.cto(sino, cfg)
    return float(g.tape.apply("mse_loss", out, g.tape.constant(target.values[None])).value)


def suite_gradcheck(seed: int = 0) -> list[Check]:
    res = gradcheck(seed)
    return [_below("gradcheck", "max_rel_error", res["max_rel_error"], 1e-4,
                   f"{len(res['rows'])} parameters, CTO-mini")]


_RUNNERS = {"adjoint": suite_adjoint, "equivariance": suite_equivariance, "slice": suite_slice,
            "disco": suite_disco, "gradcheck": suite_gradcheck}


def run(suite: str = "all", seed: int = 0) -> list[Check]:
    names = SUITES if suite == "all" else (suite,)
    checks = []
    for name in names:
        runner = _RUNNERS.get(name)
        if runner is None:
            raise ValueError(f"unknown suite {name!r}")
        checks.extend(runner(seed=seed))
    return checks


def report(checks: list[Check], elapsed: float | None = None) -> str:
    lines = [c.line() for c in checks]
    verdict = "PASS" if all(c.passed for c in checks) else "FAIL"
    tail = f" in {elapsed:.1f}s" if elapsed is not None else ""
    lines.append(f"{verdict}: {sum(c.passed for c in checks)}/{len(checks)} checks{tail}")
    return "\n".join(lines) + "\n"


def timed_run(suite: str = "all", seed: int = 0) -> tuple[list[Check], float]:
    t0 = time.perf_counter()
    checks = run(suite, seed)
    return checks, time.perf_counter() - t0
