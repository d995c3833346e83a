"""PSNR, SSIM, bit error rates, and the evaluation report container."""

import csv
import math

import numpy as np
import pytest

from bdpm.metrics import PSNR_CSV_CAP, EvalReport, bit_error_rate, psnr, ssim
from bdpm.rng import stream


def _random_image(seed: int, channels: int = 3, size: int = 16) -> np.ndarray:
    return stream(seed, 0).integers(0, 256, size=(channels, size, size), dtype=np.uint8)


class TestPsnr:
    def test_identical_is_infinite(self):
        image = _random_image(1)
        assert psnr(image, image) == math.inf

    def test_unit_offset_closed_form(self):
        """MSE 1 everywhere: PSNR = 20 log10(255) = 48.1308 dB."""
        a = np.full((1, 8, 8), 100, dtype=np.uint8)
        b = np.full((1, 8, 8), 101, dtype=np.uint8)
        assert psnr(a, b) == pytest.approx(20.0 * math.log10(255.0), abs=1e-12)

    def test_symmetry(self):
        a, b = _random_image(2), _random_image(3)
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)

    def test_channels_pool_into_one_mse(self):
        """An error in one channel is averaged over all three."""
        a = np.zeros((3, 4, 4), dtype=np.uint8)
        b = a.copy()
        b[0] += 3
        mse = (3.0 ** 2) / 3.0
        assert psnr(a, b) == pytest.approx(10.0 * math.log10(255.0 ** 2 / mse), abs=1e-12)

    def test_peak_override(self):
        a = np.zeros((1, 4, 4), dtype=np.uint8)
        b = np.ones((1, 4, 4), dtype=np.uint8)
        assert psnr(a, b, peak=1.0) == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr(_random_image(4, size=8), _random_image(4, size=16))


class TestSsim:
    def test_identical_is_one(self):
        image = _random_image(5)
        assert ssim(image, image) == pytest.approx(1.0, abs=1e-12)

    def test_constant_pair_closed_form(self):
        """Flat images: variance terms vanish, luminance term remains."""
        a = np.full((1, 8, 8), 60, dtype=np.uint8)
        b = np.full((1, 8, 8), 200, dtype=np.uint8)
        c1 = (0.01 * 255.0) ** 2
        expected = (2.0 * 60 * 200 + c1) / (60.0 ** 2 + 200.0 ** 2 + c1)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-12)

    def test_single_window_population_moments(self):
        """An 8x8 image is one window; the score matches a direct evaluation."""
        a = _random_image(6, channels=1, size=8)
        b = _random_image(7, channels=1, size=8)
        xa = a[0].astype(np.float64)
        xb = b[0].astype(np.float64)
        mu_a, mu_b = xa.mean(), xb.mean()
        var_a = ((xa - mu_a) ** 2).mean()
        var_b = ((xb - mu_b) ** 2).mean()
        cov = ((xa - mu_a) * (xb - mu_b)).mean()
        c1 = (0.01 * 255.0) ** 2
        c2 = (0.03 * 255.0) ** 2
        expected = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        )
        assert ssim(a, b) == pytest.approx(expected, abs=1e-12)

    def test_symmetry_and_upper_bound(self):
        a, b = _random_image(8), _random_image(9)
        s = ssim(a, b)
        assert s == pytest.approx(ssim(b, a), abs=1e-12)
        assert s < 1.0

    def test_rgb_uses_luma(self):
        """Channel-equal RGB scores exactly like its grayscale collapse."""
        gray = _random_image(10, channels=1)
        rgb = np.repeat(gray, 3, axis=0)
        other_gray = _random_image(11, channels=1)
        other_rgb = np.repeat(other_gray, 3, axis=0)
        assert ssim(rgb, other_rgb) == pytest.approx(ssim(gray, other_gray), abs=1e-12)

    def test_window_bounds_validated(self):
        a = _random_image(12, size=8)
        with pytest.raises(ValueError):
            ssim(a, a, window=9)
        with pytest.raises(ValueError):
            ssim(a, a, window=0)


class TestBitErrorRate:
    def test_identical_is_zero(self):
        bits = (stream(13, 0).random((8, 4, 4)) < 0.5).astype(np.uint8)
        assert bit_error_rate(bits, bits).tolist() == [0.0] * 8

    def test_complement_is_one(self):
        bits = (stream(14, 0).random((8, 4, 4)) < 0.5).astype(np.uint8)
        assert bit_error_rate(bits, 1 - bits).tolist() == [1.0] * 8

    def test_counts_exact_fractions(self):
        a = np.zeros((2, 4, 4), dtype=np.uint8)
        b = a.copy()
        b[0, 0, :2] = 1
        b[1, :, :] = 1
        rates = bit_error_rate(a, b)
        assert rates.tolist() == [2 / 16, 1.0]

    def test_rejects_non_binary_input(self):
        a = np.zeros((2, 4, 4), dtype=np.uint8)
        bad = a.copy()
        bad[0, 0, 0] = 2
        with pytest.raises(ValueError):
            bit_error_rate(a, bad)
        with pytest.raises(ValueError):
            bit_error_rate(a.astype(np.int64), a.astype(np.int64))
        with pytest.raises(ValueError):
            bit_error_rate(a[0], a[0])


class TestEvalReport:
    def _report(self):
        report = EvalReport(steps=20, wallclock=1.25)
        report.add(index=0, psnr=30.0, ssim=0.9)
        report.add(index=1, psnr=math.inf, ssim=1.0)
        report.add(index=2, psnr=24.0, ssim=0.8)
        return report

    def test_means_recompute_from_rows(self):
        report = self._report()
        means = report.means()
        assert means["psnr"] == math.inf
        assert means["ssim"] == pytest.approx((0.9 + 1.0 + 0.8) / 3)
        assert "index" not in means

    def test_key_mismatch_rejected(self):
        report = EvalReport(steps=1)
        report.add(index=0, psnr=10.0)
        with pytest.raises(ValueError):
            report.add(index=1, ssim=0.5)

    def test_csv_caps_and_appends_run_columns(self, tmp_path):
        path = tmp_path / "eval.csv"
        self._report().write_csv(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["index", "psnr", "ssim", "steps", "wallclock_s"]
        assert rows[1] == ["0", "30.000000", "0.900000", "20", "1.250"]
        assert rows[2][1] == f"{PSNR_CSV_CAP:.6f}"
        assert rows[4][0] == "mean"
        assert rows[4][1] == f"{PSNR_CSV_CAP:.6f}"
        assert [r[3] for r in rows[1:]] == ["20"] * 4

    def test_empty_report_means(self):
        assert EvalReport(steps=1).means() == {}
