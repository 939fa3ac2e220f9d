"""Metrics, tone mapping, audits and report output."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from envfield import evaluation, fitting, hdr_io
from envfield.evaluation import MetricReport, hdr_psnr, psnr, ssim, tone_map
from envfield.field import FieldConfig, SphericalField

TINY = FieldConfig(n_latent=3, heads=2, layers=1, hidden=16, pe_frequencies=2)


class TestToneMap:
    def test_clamp_and_gamma(self):
        out = tone_map(np.array([0.0, 0.25, 1.0, 4.0]), 0.0, gamma=2.0)
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0, 1.0])

    def test_offset_is_exposure(self):
        np.testing.assert_allclose(tone_map(np.array([0.1]), math.log(4.0), 1.0), [0.4])

    def test_ldr_exposure_maps_median_to_half(self, rng):
        img = rng.uniform(0.1, 10, (8, 16, 3))
        lum = img @ evaluation.LUMA
        scaled = img * math.exp(evaluation.ldr_exposure(img))
        assert np.median(scaled @ evaluation.LUMA) == pytest.approx(0.5, rel=1e-9)
        assert np.median(lum) > 0


class TestPSNR:
    def test_known_value(self):
        a = np.zeros((4, 4))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
        assert psnr(a, a + 0.1, peak=10.0) == pytest.approx(40.0)

    def test_identical_is_infinite(self):
        assert psnr(np.ones(3), np.ones(3)) == math.inf

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros(3), np.zeros(4))


class TestHDRPSNR:
    def test_exposure_invariance(self, rng):
        gt = hdr_io.generate_synthetic_env(0, 16, 32).pixels.astype(np.float64)
        pred = gt * rng.uniform(0.8, 1.2, gt.shape)
        base = hdr_psnr(np.log(pred), np.log(gt))
        assert abs(hdr_psnr(np.log(10.0 * pred), np.log(gt)) - base) < 1e-6

    @given(st.floats(-30, 30, allow_nan=False))
    @settings(max_examples=30, deadline=None)
    def test_any_log_offset(self, c):
        rng = np.random.default_rng(0)
        gt = rng.standard_normal((6, 8, 3))
        pred = gt + 0.1 * rng.standard_normal(gt.shape)
        assert hdr_psnr(pred + c, gt) == pytest.approx(hdr_psnr(pred, gt), abs=1e-6)

    def test_peak_is_ground_truth_range(self, rng):
        gt = rng.standard_normal((4, 4, 3))
        pred = gt + 0.05 * rng.standard_normal(gt.shape)
        aligned = pred + (gt - pred).mean()
        expected = 10 * math.log10(np.ptp(gt) ** 2 / np.mean((aligned - gt) ** 2))
        assert hdr_psnr(pred, gt) == pytest.approx(expected, rel=1e-12)

    def test_mask(self, rng):
        gt = rng.standard_normal((4, 4, 3))
        pred = gt.copy()
        pred[2:] += rng.standard_normal((2, 4, 3))
        mask = np.zeros((4, 4), dtype=bool)
        mask[:2] = True
        assert hdr_psnr(pred + 3.0, gt, mask) > 200.0


class TestSSIM:
    def test_identical(self, rng):
        a = rng.uniform(0, 1, (32, 32))
        assert ssim(a, a) == pytest.approx(1.0)

    def test_symmetric(self, rng):
        a, b = rng.uniform(0, 1, (32, 32, 3)), rng.uniform(0, 1, (32, 32, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9

    def test_constant_images_closed_form(self):
        # zero variance leaves only the luminance term (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1)
        c1 = (0.01 * 1.0) ** 2
        a, b = 0.3, 0.7
        expected = (2 * a * b + c1) / (a * a + b * b + c1)
        assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expected, rel=1e-9)

    def test_default_window_matches_skimage(self, rng):
        from skimage.metrics import structural_similarity

        a, b = rng.uniform(0, 1, (32, 32)), rng.uniform(0, 1, (32, 32))
        expected = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-12)

    def test_small_images(self, rng):
        a = rng.uniform(0, 1, (8, 16))
        assert ssim(a, a) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            ssim(np.zeros((2, 2)), np.zeros((2, 2)))

    def test_bounded(self, rng):
        for _ in range(5):
            s = ssim(rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16)))
            assert -1.0 <= s <= 1.0


class TestScore:
    def test_perfect_prediction_up_to_exposure(self):
        gt = hdr_io.generate_synthetic_env(4, 16, 32).pixels.astype(np.float64)
        scores = evaluation.score(gt * 7.0, gt)
        assert scores["psnr_ldr"] == math.inf or scores["psnr_ldr"] > 100
        assert scores["ssim"] == pytest.approx(1.0)

    def test_report_means(self):
        report = MetricReport()
        report.add("a", {"psnr_ldr": 10.0, "psnr_hdr": 20.0, "ssim": 0.5})
        report.add("b", {"psnr_ldr": 20.0, "psnr_hdr": 30.0, "ssim": 0.7})
        assert report.mean() == pytest.approx({"psnr_ldr": 15.0, "psnr_hdr": 25.0, "ssim": 0.6})
        rows = report.rows()
        assert rows[-1]["image"] == "mean" and len(rows) == 3


class TestAudit:
    def test_modes_are_discriminated(self):
        so2 = evaluation.equivariance_audit(SphericalField(FieldConfig(mode="so2"), seed=0), trials=100)
        so3 = evaluation.equivariance_audit(SphericalField(FieldConfig(mode="so3"), seed=0), trials=100)
        none = evaluation.equivariance_audit(SphericalField(FieldConfig(mode="none"), seed=0), trials=100)
        assert so2 < 1e-4 and so3 < 1e-4
        assert none > 1e-2

    def test_deterministic(self):
        model = SphericalField(TINY, seed=0)
        assert evaluation.equivariance_audit(model, 10, rng=3) == evaluation.equivariance_audit(model, 10, rng=3)


class TestRotationExperiment:
    def test_rows(self):
        model = SphericalField(TINY, seed=0)
        images = [hdr_io.generate_synthetic_env(0, 8, 16)]
        rows = evaluation.rotation_fit_experiment(model, images, angles=(20, 90), config=fitting.FitConfig(steps=20, batch_size=64))
        assert [r["angle_deg"] for r in rows] == [20, 90]
        for r in rows:
            assert set(r) == {"angle_deg", "E", "gt_relative_error"}
            assert r["E"] >= 0 and np.isfinite(r["gt_relative_error"])

    def test_table_angles(self):
        assert evaluation.TABLE_ANGLES == (5, 20, 45, 90, 180, 270)


class TestOutput:
    def test_csv_and_markdown(self, tmp_path):
        rows = [{"angle_deg": 5, "E": 0.125}, {"angle_deg": 270, "E": 1.5}]
        csv_path, md_path = evaluation.write_tables(rows, tmp_path / "out", "table")
        assert csv_path.read_text().splitlines() == ["angle_deg,E", "5,0.125", "270,1.5"]
        md = md_path.read_text().splitlines()
        assert md[0] == "| angle_deg |      E |"
        assert md[2] == "|         5 | 0.1250 |"

    def test_heatmap(self, rng):
        gt = rng.standard_normal((4, 8, 3))
        heat = evaluation.error_heatmap(gt + 1.0, gt)
        assert heat.shape == (4, 8, 3) and np.all((heat >= 0) & (heat <= 1))

    def test_triptych(self, tmp_path):
        gt = hdr_io.generate_synthetic_env(0, 8, 16).pixels
        evaluation.save_triptych(gt * 2.0, gt, tmp_path / "t.png")
        from PIL import Image

        assert Image.open(tmp_path / "t.png").size == (48, 8)

    def test_evaluate_fits(self):
        model = SphericalField(TINY, seed=0)
        images = [hdr_io.generate_synthetic_env(i, 8, 16) for i in range(2)]
        report, decoded = evaluation.evaluate_fits(model, images, fitting.FitConfig(steps=5, batch_size=32), names=["x", "y"])
        assert report.names == ["x", "y"] and len(decoded) == 2 and decoded[0].shape == (8, 16, 3)
        assert report.runtime > 0
