"""PSNR/SSIM behavior, including a cross-check against scikit-image."""

import math

import numpy as np
import pytest

from selfonn.metrics import MetricReport, psnr, ssim


class TestPsnr:
    def test_identical_images_infinite(self):
        a = np.random.default_rng(0).uniform(0, 1, size=(16, 16))
        assert psnr(a, a.copy()) == math.inf

    def test_closed_form_20db(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)
        assert psnr(a, b, peak=1.0) == pytest.approx(20.0, abs=1e-12)

    def test_2x2_case(self):
        a = np.zeros((2, 2))
        b = np.full((2, 2), 0.1)
        assert psnr(a, b, peak=1.0) == pytest.approx(20.0, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, size=(8, 8))
        b = rng.uniform(0, 1, size=(8, 8))
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=0)

    def test_peak_scaling(self):
        a = np.zeros((4, 4))
        b = np.full((4, 4), 25.5)
        assert psnr(a, b, peak=255.0) == pytest.approx(20.0, abs=1e-12)

    @pytest.mark.parametrize("var", [1e-2, 1e-3])
    def test_noise_variance_law(self, var):
        rng = np.random.default_rng(7)
        a = rng.uniform(0.2, 0.8, size=(256, 256))
        b = a + math.sqrt(var) * rng.standard_normal(a.shape)
        expected = 10 * math.log10(1.0 / var)
        assert psnr(a, b) == pytest.approx(expected, abs=0.5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            psnr(np.ones((2, 2)), np.ones((3, 3)))


class TestSsim:
    def test_identical_is_one(self):
        a = np.random.default_rng(2).uniform(0, 1, size=(32, 32))
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-9)

    def test_bounded_and_symmetric(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, size=(24, 24))
        b = rng.uniform(0, 1, size=(24, 24))
        v = ssim(a, b)
        assert -1.0 <= v <= 1.0
        assert v == pytest.approx(ssim(b, a), abs=1e-12)

    def test_inverted_high_contrast_low_similarity(self):
        # checkerboard-ish high contrast pattern vs its inversion
        rng = np.random.default_rng(4)
        base = (rng.uniform(0, 1, size=(64, 64)) > 0.5).astype(float)
        inv = 1.0 - base
        value = ssim(base, inv)
        assert value < 0.2

        skimage = pytest.importorskip("skimage.metrics")
        ref = skimage.structural_similarity(
            base, inv, data_range=1.0, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False,
        )
        assert value == pytest.approx(ref, abs=1e-7)

    def test_matches_reference_implementation_random(self):
        skimage = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(5)
        a = rng.uniform(0, 1, size=(40, 40))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        ref = skimage.structural_similarity(
            a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False,
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-7)

    def test_constant_images_luminance_only(self):
        mu_a, mu_b = 0.3, 0.7
        a = np.full((16, 16), mu_a)
        b = np.full((16, 16), mu_b)
        c1 = 0.01**2
        expected = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-10)

    def test_channel_averaged(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0, 1, size=(3, 20, 20))
        b = rng.uniform(0, 1, size=(3, 20, 20))
        per_channel = [ssim(a[c], b[c]) for c in range(3)]
        assert ssim(a, b) == pytest.approx(np.mean(per_channel), abs=1e-12)

    def test_small_image_rejected(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.ones((8, 8)), np.ones((8, 8)))


class TestMetricReport:
    def test_mean_excludes_infinite(self):
        report = MetricReport()
        report.add("a", 20.0, 0.9)
        report.add("b", math.inf, 1.0)
        report.add("c", 30.0, 0.8)
        assert report.mean_psnr == pytest.approx(25.0)
        assert report.mean_ssim == pytest.approx((0.9 + 1.0 + 0.8) / 3)

    def test_mean_is_exact_mean_of_entries(self):
        rng = np.random.default_rng(8)
        report = MetricReport()
        values = rng.uniform(10, 40, size=5)
        for i, v in enumerate(values):
            report.add(str(i), float(v))
        assert report.mean_psnr == sum(float(v) for v in values) / 5

    def test_all_infinite(self):
        report = MetricReport()
        report.add("a", math.inf)
        assert report.mean_psnr == math.inf

    def test_csv_roundtrip_fields(self, tmp_path):
        report = MetricReport()
        report.add("x", 21.5, 0.75)
        path = tmp_path / "report.csv"
        report.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "image_id,psnr_db,ssim"
        assert lines[1].startswith("x,21.5")
        assert lines[-1].startswith("mean,")
