"""Acceptance criteria 1-12, each at its stated tolerance and runtime budget.

Every test prints one ``PASS``/``FAIL`` line (visible in the terminal output)
before asserting, so a full run doubles as the acceptance report.
"""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from ctoperator import verify
from ctoperator.classical import FbpConfig, SartConfig, fbp, sart
from ctoperator.core import (AngleSet, SampleMask, Sinogram, apply_mask, make_rng,
                             resample_bilinear)
from ctoperator.disco import Grid, KernelBasis, apply, discretize
from ctoperator.metrics import psnr
from ctoperator.model import CtoConfig, infer_superres
from ctoperator.phantom import analytic_sinogram, disk, rasterize, shepp_logan
from ctoperator.projector import ProjectorConfig, forward, get_projector
from ctoperator.training import (TrainConfig, evaluate, evaluate_fbp, make_phantoms, measure,
                                 train)

TRAIN_STEPS = 1000
TRAIN_IMAGES = 40
TRAIN_SEED = 0
DATA_SEED = 1
TEST_SEED = 2
TEST_IMAGES = 10


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail, seconds=None):
        timing = f" [{seconds:.1f}s]" if seconds is not None else ""
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {number}: {detail}{timing}")
    return emit


# -- 1-4: projector identities -------------------------------------------------

def test_c01_adjoint_identity(report):
    t0 = time.perf_counter()
    cfg = ProjectorConfig(64, 64, AngleSet.uniform_views(45), 96)
    op = get_projector(cfg)
    rng = make_rng(0)
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal(cfg.image_shape)
        y = rng.standard_normal(cfg.sino_shape)
        ax = op.forward(x)
        err = abs(np.vdot(ax, y) - np.vdot(x, op.adjoint(y))) / (np.linalg.norm(ax) * np.linalg.norm(y))
        worst = max(worst, err)
    dt = time.perf_counter() - t0
    ok = worst < 1e-12 and dt < 5
    report(1, ok, f"max relative dot-product error {worst:.3g} (< 1e-12) over 20 pairs", dt)
    assert ok


def test_c02_projector_fidelity(report):
    t0 = time.perf_counter()
    n = 128
    spec = disk(0.8 * n / 2)
    img = rasterize(spec, n, n, 1.0)
    angles = AngleSet.uniform_views(180)
    ref = analytic_sinogram(spec, angles, 192, 1.0).values
    errs = []
    for step in (1.0, 0.5, 0.25):
        p = get_projector(ProjectorConfig(n, n, angles, 192, step_fraction=step)).forward(img.values)
        errs.append(float(np.linalg.norm(p - ref) / np.linalg.norm(ref)))
    dt = time.perf_counter() - t0
    ok = errs[1] < 0.02 and errs[0] > errs[1] > errs[2] and dt < 30
    report(2, ok, "relative L2 error vs analytic chords at step 1, 1/2, 1/4: "
           + ", ".join(f"{e:.6f}" for e in errs) + " (< 0.02 at default 1/2, strictly decreasing)", dt)
    assert ok


def test_c03_pi_flip(report):
    t0 = time.perf_counter()
    cfg = ProjectorConfig(128, 128, AngleSet.uniform_views(360, 2 * math.pi), 192)
    p = forward(cfg, rasterize(shepp_logan(60.0), 128, 128, 1.0)).values
    err = float(np.max(np.abs(p[180:] - p[:180, ::-1])))
    dt = time.perf_counter() - t0
    ok = err < 1e-6 and dt < 10
    report(3, ok, f"max |p(theta+pi, r) - p(theta, -r)| = {err:.3g} (< 1e-6)", dt)
    assert ok


def test_c04_fourier_slice(report):
    t0 = time.perf_counter()
    check = verify.suite_slice(seed=0)[0]
    dt = time.perf_counter() - t0
    ok = check.passed and check.tolerance == 0.05 and dt < 10
    report(4, ok, f"Gaussian blob maxRelError {check.value:.4f} (< 0.05) for |w| <= 0.25 Nyquist", dt)
    assert ok


# -- 5-7: operator properties --------------------------------------------------

def test_c05_disco_equivariance(report):
    t0 = time.perf_counter()
    checks = {c.name: c for c in verify.suite_equivariance(seed=0)}
    wanted = {"circular_shift": 1e-12, "flipped_theta_shift": 1e-12, "nos_theta_shift": 1e-10}
    dt = time.perf_counter() - t0
    ok = all(checks[k].passed and checks[k].tolerance == tol for k, tol in wanted.items()) and dt < 30
    report(5, ok, ", ".join(f"{k} {checks[k].value:.3g} (< {wanted[k]:g})" for k in wanted), dt)
    assert ok


def test_c06_discretization_agnostic(report):
    t0 = time.perf_counter()
    # error against the continuous integral at each resolution
    errs = verify.disco_convergence(levels=(32, 64, 128))
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    # and the pairwise discrepancy between neighbouring resolutions
    basis = KernelBasis(0.1, 3, 6)
    coeffs = make_rng(6).standard_normal(basis.total)
    outs = []
    for n in (32, 64, 128):
        c = (np.arange(n) + 0.5) / n
        smooth = verify._smooth(c[:, None], c[None, :])
        outs.append(apply(discretize(basis, Grid((n, n)), Grid((32, 32))), smooth, coeffs)[0])
    e32 = np.linalg.norm(outs[0] - outs[1]) / np.linalg.norm(outs[1])
    e64 = np.linalg.norm(outs[1] - outs[2]) / np.linalg.norm(outs[2])
    dt = time.perf_counter() - t0
    ok = min(ratios) >= 1.5 and e32 / e64 >= 1.5 and dt < 60
    report(6, ok, "error vs continuous kernel " + ", ".join(f"{e:.3g}" for e in errs)
           + f" (ratios {ratios[0]:.2f}, {ratios[1]:.2f}); cross-resolution "
           f"{e32:.3g} -> {e64:.3g} (ratio {e32 / e64:.2f}, need >= 1.5)", dt)
    assert ok


def test_c07_gradient_correctness(report):
    t0 = time.perf_counter()
    res = verify.gradcheck(seed=0, samples=20)
    dt = time.perf_counter() - t0
    ok = res["max_rel_error"] < 1e-4 and len(res["rows"]) == 20 and dt < 120
    report(7, ok, f"CTO-mini finite-difference max relative error {res['max_rel_error']:.3g} "
           "(< 1e-4) over 20 parameters", dt)
    assert ok


# -- 8: classical baselines ----------------------------------------------------

def test_c08_classical_baselines(report):
    t0 = time.perf_counter()
    cfg = ProjectorConfig.default()
    img = rasterize(disk(100.0), 256, 256, 1.0)
    full = forward(cfg, img)
    scores = []
    for views in (9, 18, 36, 72, 720):
        sub = apply_mask(full, SampleMask.stride(720, views))
        proj = ProjectorConfig(256, 256, sub.angle_set, 300)
        scores.append(psnr(fbp(FbpConfig(), proj, sub), img).value)
    fbp_ok = all(a < b for a, b in zip(scores, scores[1:]))

    small = ProjectorConfig(64, 64, AngleSet.uniform_views(72), 96)
    target = 0.4 * rasterize(disk(25.0), 64, 64, 1.0).values
    sino = Sinogram(small.angle_set, get_projector(small).forward(target))
    history = []
    out = sart(SartConfig(), small, sino, history=history).values
    sart_ok = (all(b <= a for a, b in zip(history, history[1:]))
               and out.min() >= 0.0 and out.max() <= 0.549)
    dt = time.perf_counter() - t0
    ok = fbp_ok and sart_ok and dt < 120
    report(8, ok, "FBP PSNR over {9,18,36,72,720} views: " + ", ".join(f"{s:.2f}" for s in scores)
           + "; SART residual " + ", ".join(f"{h:.4g}" for h in history)
           + f"; output in [{out.min():.3g}, {out.max():.3g}]", dt)
    assert ok


# -- 9-11: trained CTO-mini ----------------------------------------------------

def _fit(cfg):
    tcfg = TrainConfig(lr=1e-3, ladder=(15, 30, 60), steps_per_epoch=TRAIN_IMAGES)
    data = make_phantoms(TRAIN_IMAGES, cfg, DATA_SEED)
    t0 = time.perf_counter()
    res = train(cfg, data, TRAIN_STEPS // TRAIN_IMAGES, TRAIN_SEED, tcfg)
    return res.params, time.perf_counter() - t0


@pytest.fixture(scope="module")
def main_model():
    cfg = CtoConfig.mini()
    params, seconds = _fit(cfg)
    return cfg, params, seconds


@pytest.fixture(scope="module")
def ablation_model():
    cfg = CtoConfig.mini().without_equivariance()
    params, seconds = _fit(cfg)
    return cfg, params, seconds


def test_c09_desk_scale_training(report, main_model):
    cfg, params, train_seconds = main_model
    t0 = time.perf_counter()
    test = make_phantoms(TEST_IMAGES, cfg, TEST_SEED)
    rows = []
    for views in (15, 30, 60):
        rows.append((views, float(np.mean(evaluate(params, cfg, test, views))),
                     float(np.mean(evaluate_fbp(cfg, test, views)))))
    dt = train_seconds + time.perf_counter() - t0
    sparse_gain = rows[0][1] - rows[0][2]
    ok = sparse_gain >= 3.0 and all(m > f for _, m, f in rows) and dt < 30 * 60
    report(9, ok, f"{TRAIN_STEPS} Adam steps; CTO vs FBP mean PSNR "
           + "; ".join(f"{v} views {m:.2f} vs {f:.2f}" for v, m, f in rows)
           + f" (gain at 15 views {sparse_gain:.2f} dB, need >= 3)", dt)
    assert ok


def test_c10_equivariance_ablation(report, main_model, ablation_model):
    cfg, params, _ = main_model
    abl_cfg, abl_params, abl_seconds = ablation_model
    t0 = time.perf_counter()
    rotated = make_phantoms(TEST_IMAGES, cfg, TEST_SEED + 1, rotate=True)
    ours = np.mean([np.mean(evaluate(params, cfg, rotated, v)) for v in (15, 30, 60)])
    zero = np.mean([np.mean(evaluate(abl_params, abl_cfg, rotated, v)) for v in (15, 30, 60)])
    dt = abl_seconds + time.perf_counter() - t0
    ok = ours >= zero
    report(10, ok, f"rotated test set, mean PSNR over 15/30/60 views: flipped-circular {ours:.2f} "
           f"vs zero padding {zero:.2f} dB (need >=)", dt)
    assert ok


def test_c11_zero_shot_superres(report, main_model):
    cfg, params, _ = main_model
    t0 = time.perf_counter()
    # sinograms stay at the training resolution; the reference is the
    # base ground truth bilinearly upsampled to the finer grid
    n = 2 * cfg.image_size
    redisc, fixed = [], []
    for truth in make_phantoms(TEST_IMAGES, cfg, TEST_SEED):
        sino = measure(truth, cfg, 15)
        ref = resample_bilinear(truth, n, n)
        redisc.append(psnr(infer_superres(params, sino, cfg, 2), ref).value)
        fixed.append(psnr(infer_superres(params, sino, cfg, 2, fixed_pixel_support=True), ref).value)
    dt = time.perf_counter() - t0
    ok = np.mean(redisc) > np.mean(fixed) and dt < 600
    report(11, ok, f"128^2 from a 64^2 model, 15 views: re-discretized kernels {np.mean(redisc):.2f} "
           f"vs fixed pixel support {np.mean(fixed):.2f} dB (need >)", dt)
    assert ok


# -- 12: determinism -----------------------------------------------------------

def test_c12_determinism(report, tmp_path):
    t0 = time.perf_counter()
    env = dict(os.environ)
    env.pop("CTO_THREADS", None)
    cfg_json = tmp_path / "cfg.json"
    cfg_json.write_text('{"model": {"image_size": 32, "spacing": 0.0625, "det_count": 48, '
                        '"det_spacing": 0.0625, "noi": {"levels": 1, "hidden": 4}, '
                        '"nos_spatial": {"levels": 1, "hidden": 4}, '
                        '"nos_freq": {"levels": 1, "hidden": 4}}, "train": {"ladder": [6, 12]}}')

    def pipeline(root):
        # relative paths, so reports that echo their arguments compare equal
        root.mkdir()
        (root / "data").mkdir()
        data = "data/"
        steps = [
            ["phantom", "--spec", "random", "--seed", "3", "--size", "32", "--out", data + "a"],
            ["phantom", "--spec", "shepp-logan", "--size", "32", "--out", data + "b"],
            ["project", "--in", data + "a", "--views", "12", "--detectors", "48",
             "--noise-sigma", "0.05", "--seed", "9", "--out", "s"],
            ["subsample", "--in", "s", "--views", "6", "--out", "s6"],
            ["recon", "--method", "fbp", "--in", "s", "--size", "32", "--out", "fbp"],
            ["recon", "--method", "sart", "--in", "s", "--size", "32", "--out", "sart"],
            ["train", "--config", cfg_json.resolve(), "--data-dir", data, "--epochs", "2", "--seed", "4",
             "--out", "m"],
            ["recon", "--method", "cto", "--model", "m", "--in", "s6",
             "--out", "cto"],
            ["metrics", "--test", "fbp", "--ref", data + "a", "--unit", "cm",
             "--out", "rep"],
        ]
        for argv in steps:
            proc = subprocess.run([sys.executable, "-m", "ctoperator", "--threads", "1", "-q",
                                   *map(str, argv)], capture_output=True, text=True, env=env, cwd=root)
            assert proc.returncode == 0, proc.stderr
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    first = pipeline(tmp_path / "one")
    second = pipeline(tmp_path / "two")
    differing = [str(k) for k in first if first[k] != second.get(k)]
    dt = time.perf_counter() - t0
    ok = not differing and first.keys() == second.keys()
    report(12, ok, f"{len(first)} output files from 9 commands byte-identical across two runs"
           if ok else f"differing outputs: {differing}", dt)
    assert ok
