import math

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from ctoperator.core import AngleSet, Image, make_rng
from ctoperator.classical import FbpConfig, fbp
from ctoperator.metrics import (MU_WATER, PSNR_CAP, SSIM_K1, MetricReport, psnr, rmse_hu, ssim,
                                to_hu)
from ctoperator.phantom import disk, rasterize
from ctoperator.projector import ProjectorConfig, forward


class TestPsnr:
    def test_identical_is_capped_and_flagged(self):
        x = make_rng(0).random((8, 8))
        r = psnr(x, x)
        assert r.value == PSNR_CAP == 99.0 and r.exact

    def test_closed_form(self):
        r = psnr(np.full((4, 4), 0.1), np.zeros((4, 4)), peak=1.0)
        assert r.value == pytest.approx(20.0, abs=1e-12)
        assert not r.exact

    def test_symmetric_with_fixed_peak(self):
        rng = make_rng(1)
        a, b = rng.random((2, 16, 16))
        assert psnr(a, b, 1.0).value == psnr(b, a, 1.0).value

    def test_peak_defaults_to_reference_max(self):
        rng = make_rng(2)
        a, b = rng.random((2, 10, 10))
        assert psnr(a, b).value == psnr(a, b, float(b.max())).value

    def test_errors(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((3, 3)), np.zeros((3, 4)))
        with pytest.raises(ValueError):
            psnr(np.ones((3, 3)), np.zeros((3, 3)))

    def test_fbp_disk_matches_independent_computation(self):
        n = 64
        img = rasterize(disk(24.0), n, n, 1.0)
        cfg = ProjectorConfig(n, n, AngleSet.uniform_views(720), 96)
        rec = fbp(FbpConfig(), cfg, forward(cfg, img))
        ours = psnr(rec, img).value
        theirs = peak_signal_noise_ratio(img.values, rec.values, data_range=float(img.values.max()))
        assert abs(ours - theirs) < 1e-9


class TestSsim:
    def test_self_is_one(self):
        x = make_rng(3).standard_normal((20, 20))
        assert ssim(x, x) == 1.0

    def test_constant_images_closed_form(self):
        a = np.full((16, 16), 0.5)
        b = np.full((16, 16), 0.52)
        c1 = (SSIM_K1 * 1.0) ** 2
        expect = (2 * 0.5 * 0.52 + c1) / (0.5 ** 2 + 0.52 ** 2 + c1)
        assert ssim(a, b, peak=1.0) == pytest.approx(expect, abs=1e-12)

    def test_inverted_binary_image(self):
        x = (make_rng(4).random((32, 32)) > 0.5).astype(float)
        assert ssim(x, 1 - x, peak=1.0) < 0.5

    def test_matches_scikit_image_map(self):
        rng = make_rng(5)
        ref = rng.random((40, 36))
        test = ref + 0.1 * rng.standard_normal(ref.shape)
        _, smap = structural_similarity(ref, test, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False, full=True)
        assert ssim(test, ref, peak=1.0) == pytest.approx(float(smap.mean()), abs=1e-10)


class TestHu:
    def test_scale(self):
        assert np.allclose(to_hu(np.array([0.0, MU_WATER["mm"]]), MU_WATER["mm"]), [-1000, 0])

    def test_zero_for_identical(self):
        x = make_rng(6).random((5, 5))
        assert rmse_hu(x, x) == 0.0

    @pytest.mark.parametrize("unit", ["mm", "cm"])
    def test_water_versus_air(self, unit):
        mu = MU_WATER[unit]
        assert rmse_hu(np.full((4, 4), mu), np.zeros((4, 4)), mu) == pytest.approx(1000.0, rel=1e-14)

    def test_tenth_of_water_offset(self):
        mu = 0.0192
        rng = make_rng(7)
        ref = rng.random((6, 6)) * mu
        assert rmse_hu(ref + 0.1 * mu, ref, mu) == pytest.approx(100.0, rel=1e-12)

    def test_offset_invariance_and_symmetry(self):
        rng = make_rng(8)
        a, b = rng.random((2, 9, 9))
        base = rmse_hu(a, b)
        assert rmse_hu(a + 0.3, b + 0.3) == pytest.approx(base, rel=1e-12)
        assert rmse_hu(b, a) == base

    def test_bad_mu(self):
        with pytest.raises(ValueError):
            rmse_hu(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)


class TestReport:
    def test_aggregate_and_text(self):
        rng = make_rng(9)
        rep = MetricReport()
        ref = rng.random((12, 12))
        rep.add("a", ref, ref, 0.0192)
        rep.add("b", ref + 0.01, ref, 0.0192)
        agg = rep.aggregate()
        assert rep.count == 2 and agg["psnr"][2] == 2
        assert agg["psnr"][0] == pytest.approx((99.0 + rep.psnr[1]) / 2)
        text = rep.to_text()
        assert "a: psnr=99.000000 dB (exact match)" in text
        kv = rep.to_keyvalue().splitlines()
        assert [line.split()[0] for line in kv] == ["psnr", "ssim", "rmse_hu"]
        assert float(kv[2].split()[1]) == pytest.approx(rep.rmse_hu[1] / 2)

    def test_empty(self):
        agg = MetricReport().aggregate()
        assert all(math.isnan(v[0]) and v[2] == 0 for v in agg.values())

    def test_accepts_images(self):
        img = Image(np.ones((4, 4)), 1.0)
        rep = MetricReport()
        rep.add("x", img, img, 0.192)
        assert rep.exact == [True]
