import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctoperator.core import AngleSet, Image, Sinogram, make_rng
from ctoperator.phantom import analytic_sinogram, disk, rasterize, shepp_logan
from ctoperator.projector import (ProjectorConfig, adjoint, centered_spectrum_1d, forward,
                                  fourier_slice_check, get_projector)


def _cfg(n=64, views=45, dets=96, **kw):
    return ProjectorConfig(n, n, AngleSet.uniform_views(views), dets, **kw)


def _rel_dot_error(cfg, seed):
    rng = make_rng(seed)
    op = get_projector(cfg)
    x = rng.standard_normal(cfg.image_shape)
    y = rng.standard_normal(cfg.sino_shape)
    ax = op.forward(x)
    lhs, rhs = np.vdot(ax, y), np.vdot(x, op.adjoint(y))
    return abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y))


class TestConfig:
    def test_step_fraction_range(self):
        for bad in (0.0, 1.5, -0.1):
            with pytest.raises(ValueError):
                _cfg(step_fraction=bad)

    def test_only_parallel_beam(self):
        with pytest.raises(ValueError):
            _cfg(geometry="fan")

    def test_defaults_follow_acquisition_protocol(self):
        cfg = ProjectorConfig.default()
        assert cfg.image_shape == (256, 256)
        assert cfg.sino_shape == (720, 300)
        assert cfg.det_spacing == cfg.spacing
        assert cfg.step_fraction == 0.5
        # 300 bins at pixel pitch cover the inscribed circle, not the full diagonal
        assert cfg.det_count * cfg.det_spacing >= 256 * cfg.spacing


class TestForward:
    def test_zero_image(self):
        cfg = _cfg()
        assert np.all(forward(cfg, Image.zeros(64, 64)).values == 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(_cfg(), Image.zeros(32, 32))
        with pytest.raises(ValueError):
            forward(_cfg(), Image.zeros(64, 64, spacing=2.0))

    def test_linearity(self):
        cfg = _cfg()
        op = get_projector(cfg)
        rng = make_rng(3)
        x, y = rng.standard_normal((2, 64, 64))
        lhs = op.forward(2.5 * x - 0.7 * y)
        rhs = 2.5 * op.forward(x) - 0.7 * op.forward(y)
        assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) < 1e-12

    def test_disk_matches_analytic_and_converges(self):
        n = 128
        spec = disk(0.8 * n / 2)
        img = rasterize(spec, n, n, 1.0)
        angles = AngleSet.uniform_views(180)
        ref = analytic_sinogram(spec, angles, 192, 1.0).values
        errs = []
        for step in (1.0, 0.5, 0.25):
            cfg = ProjectorConfig(n, n, angles, 192, step_fraction=step)
            p = get_projector(cfg).forward(img.values)
            errs.append(np.linalg.norm(p - ref) / np.linalg.norm(ref))
        assert max(errs) < 0.02
        assert errs[0] > errs[1] > errs[2]

    def test_quarter_turn_is_half_period_shift(self):
        # rot90 is an exact grid permutation. Rows index +y, so on the physical
        # plane it is a clockwise quarter turn: q(theta) = p(theta + pi/2)
        k = 36
        cfg = _cfg(views=k)
        img = rasterize(shepp_logan(28.0), 64, 64, 1.0).values
        p = get_projector(cfg).forward(img)
        q = get_projector(cfg).forward(np.rot90(img))
        h = k // 2
        assert np.max(np.abs(q[:h] - p[h:])) < 1e-12
        assert np.max(np.abs(q[h:] - p[:h, ::-1])) < 1e-12

    def test_pi_flip_shepp_logan(self):
        cfg = ProjectorConfig(128, 128, AngleSet.uniform_views(360, 2 * math.pi), 192)
        p = forward(cfg, rasterize(shepp_logan(60.0), 128, 128, 1.0)).values
        assert np.max(np.abs(p[180:] - p[:180, ::-1])) < 1e-6

    def test_single_view_has_one_row(self):
        cfg = _cfg(views=1)
        assert forward(cfg, Image(np.ones((64, 64)), 1.0)).values.shape == (1, 96)


class TestAdjoint:
    def test_zero_sinogram(self):
        cfg = _cfg()
        sino = Sinogram(cfg.angle_set, np.zeros(cfg.sino_shape))
        assert np.all(adjoint(cfg, sino).values == 0.0)

    def test_dot_product(self):
        cfg = _cfg()
        assert max(_rel_dot_error(cfg, s) for s in range(5)) < 1e-12

    @settings(max_examples=15, deadline=None)
    @given(st.integers(4, 24), st.integers(4, 24), st.integers(1, 12), st.integers(3, 40),
           st.sampled_from([0.25, 0.5, 1.0]), st.sampled_from([0.5, 1.0, 1.7]),
           st.integers(0, 1000))
    def test_dot_product_property(self, w, h, views, dets, step, det_spacing, seed):
        cfg = ProjectorConfig(w, h, AngleSet.uniform_views(views), dets, 1.0, det_spacing, step)
        assert _rel_dot_error(cfg, seed) < 1e-12

    def test_single_view_stripes(self):
        ones = np.ones((1, 64))
        at0 = ProjectorConfig(64, 64, AngleSet(np.array([0.0])), 64)
        img = get_projector(at0).adjoint(ones)
        # rays at theta = 0 run along y, so every column is constant
        assert np.max(np.abs(img - img[0:1, :])) < 1e-12
        at90 = ProjectorConfig(64, 64, AngleSet(np.array([math.pi / 2])), 64)
        img90 = get_projector(at90).adjoint(ones)
        assert np.max(np.abs(img90 - img90[:, 0:1])) < 1e-12
        # rotating coordinates by a quarter turn maps one pattern onto the other
        assert np.max(np.abs(np.rot90(img) - img90)) < 1e-12

    def test_grid_mismatch(self):
        cfg = _cfg()
        with pytest.raises(ValueError):
            adjoint(cfg, Sinogram(AngleSet.uniform_views(44), np.zeros((44, 96))))
        with pytest.raises(ValueError):
            adjoint(cfg, Sinogram(AngleSet.uniform_views(45, 2 * math.pi), np.zeros((45, 96))))

    def test_operator_norm_estimate(self):
        cfg = ProjectorConfig(16, 16, AngleSet.uniform_views(8), 24)
        op = get_projector(cfg)
        dense = np.stack([op.forward(e.reshape(16, 16)).ravel() for e in np.eye(256)], axis=1)
        top = np.linalg.norm(dense, 2) ** 2
        assert op.norm_sq() == pytest.approx(top, rel=1e-3)


class TestFourierSlice:
    def test_zero_image(self):
        res = fourier_slice_check(_cfg(n=32, dets=48), Image.zeros(32, 32))
        assert res["maxRelError"] == 0.0

    def test_gaussian_blob(self):
        n = 128
        xs = np.arange(n) - (n - 1) / 2
        blob = np.exp(-(xs[None, :] ** 2 + xs[:, None] ** 2) / (2 * 8.0 ** 2))
        res = fourier_slice_check(ProjectorConfig(n, n, AngleSet.uniform_views(180), 192),
                                  Image(blob, 1.0), band=0.25)
        assert res["maxRelError"] < 0.05

    def test_off_center_blob_spectrum_is_flat_in_theta(self):
        n = 64
        xs = np.arange(n) - (n - 1) / 2
        blob = np.exp(-((xs[None, :] - 12) ** 2 + (xs[:, None] + 7) ** 2) / (2 * 1.5 ** 2))
        cfg = ProjectorConfig(n, n, AngleSet.uniform_views(90), 96)
        sino = get_projector(cfg).forward(blob)
        freqs, spec = centered_spectrum_1d(sino, 1.0, 384)
        band = np.abs(freqs) <= 0.25 * 0.5
        mag = np.abs(spec[:, band])
        spread = np.max(np.abs(mag - mag.mean(axis=0)), axis=0) / mag.max()
        assert spread.max() < 0.05

    def test_non_square_rejected(self):
        cfg = ProjectorConfig(16, 8, AngleSet.uniform_views(4), 24)
        with pytest.raises(ValueError):
            fourier_slice_check(cfg, Image.zeros(16, 8))


@pytest.mark.parametrize("shape, dets, det_spacing, step", [((40, 33), 51, 0.8, 0.5),
                                                            ((20, 24), 60, 1.3, 0.25)])
def test_matrix_free_path_matches_assembled(monkeypatch, shape, dets, det_spacing, step):
    import ctoperator.projector as projector
    w, h = shape
    cfg = ProjectorConfig(w, h, AngleSet.uniform_views(37), dets, 0.7, det_spacing, step)
    assembled = projector.Projector(cfg)
    monkeypatch.setattr(projector, "_ASSEMBLY_LIMIT", 0)
    direct = projector.Projector(cfg)
    rng = make_rng(8)
    x = rng.standard_normal(cfg.image_shape)
    y = rng.standard_normal(cfg.sino_shape)
    assert np.max(np.abs(direct.forward(x) - assembled.forward(x))) < 1e-12
    assert np.max(np.abs(direct.adjoint(y) - assembled.adjoint(y))) < 1e-12
