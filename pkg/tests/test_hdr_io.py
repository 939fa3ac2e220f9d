"""RGBE codec, synthetic environments, augmentation and batch assembly."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import stats

from envfield import geometry, hdr_io
from envfield.hdr_io import EnvironmentImage, HDRFormatError


def _header(H, W):
    return f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {H} +X {W}\n".encode()


def _luminance(pixels):
    return pixels @ np.array([0.2126, 0.7152, 0.0722])


class TestRGBEFormula:
    def test_decode_unit(self):
        np.testing.assert_array_equal(hdr_io.rgbe_to_float([128, 128, 128, 129]), [1.0, 1.0, 1.0])

    def test_decode_zero_exponent(self):
        np.testing.assert_array_equal(hdr_io.rgbe_to_float([0, 0, 0, 0]), [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(hdr_io.rgbe_to_float([200, 10, 3, 0]), [0.0, 0.0, 0.0])

    def test_decode_matches_mantissa_formula(self, rng):
        rgbe = rng.integers(1, 256, size=(100, 4)).astype(np.uint8)
        expected = rgbe[:, :3] / 256.0 * 2.0 ** (rgbe[:, 3:].astype(float) - 128)
        np.testing.assert_allclose(hdr_io.rgbe_to_float(rgbe), expected, rtol=1e-15)

    def test_encode_unit(self):
        np.testing.assert_array_equal(hdr_io.float_to_rgbe([1.0, 1.0, 1.0]), [128, 128, 128, 129])

    def test_encode_zero(self):
        np.testing.assert_array_equal(hdr_io.float_to_rgbe(np.zeros((4, 5, 3))), np.zeros((4, 5, 4)))

    def test_encode_rejects_negative(self):
        with pytest.raises(ValueError):
            hdr_io.float_to_rgbe([0.5, -0.1, 0.2])
        with pytest.raises(ValueError):
            EnvironmentImage(-np.ones((2, 2, 3)))

    @given(st.lists(st.floats(1e-6, 1e6), min_size=3, max_size=3))
    def test_quantisation_bound(self, rgb):
        rgb = np.array(rgb)
        back = hdr_io.rgbe_to_float(hdr_io.float_to_rgbe(rgb))
        # 8-bit mantissa shared across channels: error below 1/128 of the largest channel
        assert np.max(np.abs(back - rgb)) <= rgb.max() / 128

    def test_encode_decode_idempotent_after_one_trip(self, rng):
        pixels = np.exp(rng.normal(0, 3, size=(6, 9, 3)))
        once = hdr_io.rgbe_to_float(hdr_io.float_to_rgbe(pixels))
        twice = hdr_io.rgbe_to_float(hdr_io.float_to_rgbe(once))
        np.testing.assert_array_equal(once, twice)


class TestFiles:
    @pytest.mark.parametrize("rle", [True, False])
    def test_round_trip_relative_error(self, tmp_path, rng, rle):
        pixels = np.exp(rng.normal(0.0, 4.0, size=(16, 40, 3))).astype(np.float32)
        pixels[3, :10] = 0.0
        path = tmp_path / "img.hdr"
        hdr_io.save_hdr(pixels, path, rle=rle)
        back = hdr_io.load_hdr(path).pixels
        peak = np.maximum(pixels.max(axis=-1, keepdims=True), 1e-30)
        assert np.max(np.abs(back - pixels) / peak) < 0.01

    def test_rle_and_flat_decode_identically(self, rng):
        pixels = np.exp(rng.normal(0, 2, size=(5, 64, 3)))
        pixels[:, 20:50] = 3.0  # long runs
        np.testing.assert_array_equal(hdr_io.decode_hdr(hdr_io.encode_hdr(pixels, rle=True)),
                                      hdr_io.decode_hdr(hdr_io.encode_hdr(pixels, rle=False)))

    def test_rle_compresses_constant_rows(self):
        pixels = np.ones((4, 100, 3))
        assert len(hdr_io.encode_hdr(pixels, rle=True)) < len(hdr_io.encode_hdr(pixels, rle=False)) / 5

    def test_hand_built_rle_scanline(self):
        # one 8-pixel scanline: R is a run of 8, G is a literal block, B two runs, E a run
        W = 8
        line = bytes([2, 2, 0, W])
        line += bytes([128 + 8, 64])
        line += bytes([8, 1, 2, 3, 4, 5, 6, 7, 8])
        line += bytes([128 + 4, 10, 128 + 4, 20])
        line += bytes([128 + 8, 130])
        out = hdr_io.decode_hdr(_header(1, W) + line)
        scale = 2.0 ** (130 - 136)
        np.testing.assert_array_equal(out[0, :, 0], 64 * scale)
        np.testing.assert_array_equal(out[0, :, 1], np.arange(1, 9) * scale)
        np.testing.assert_array_equal(out[0, :, 2], [10 * scale] * 4 + [20 * scale] * 4)

    def test_hand_built_flat_scanline(self):
        W = 3
        data = bytes([128, 128, 128, 129, 0, 0, 0, 0, 64, 32, 16, 130])
        out = hdr_io.decode_hdr(_header(1, W) + data)
        np.testing.assert_array_equal(out[0], [[1, 1, 1], [0, 0, 0], [1.0, 0.5, 0.25]])

    def test_missing_signature(self):
        with pytest.raises(HDRFormatError) as exc:
            hdr_io.decode_hdr(b"P6\n2 2\n")
        assert exc.value.offset == 0

    def test_unsupported_resolution_line_offset(self):
        head = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n"
        with pytest.raises(HDRFormatError) as exc:
            hdr_io.decode_hdr(head + b"+Y 2 +X 2\n" + bytes(16))
        assert exc.value.offset == len(head)

    def test_unsupported_format(self):
        with pytest.raises(HDRFormatError) as exc:
            hdr_io.decode_hdr(b"#?RADIANCE\nFORMAT=32-bit_rle_xyze\n\n-Y 1 +X 1\n" + bytes(4))
        assert exc.value.offset == len(b"#?RADIANCE\n")

    def test_truncated_scanline_reports_offset(self):
        data = hdr_io.encode_hdr(np.ones((4, 16, 3)), rle=False)
        cut = len(_header(4, 16)) + 2 * 16 * 4 + 10
        with pytest.raises(HDRFormatError) as exc:
            hdr_io.decode_hdr(data[:cut])
        assert exc.value.offset == len(_header(4, 16)) + 2 * 16 * 4
        assert "scanline 2" in str(exc.value)

    def test_truncated_rle_reports_offset(self):
        data = hdr_io.encode_hdr(np.ones((2, 16, 3)), rle=True)
        with pytest.raises(HDRFormatError) as exc:
            hdr_io.decode_hdr(data[:-1])
        assert len(_header(2, 16)) < exc.value.offset <= len(data)

    def test_error_names_the_file(self, tmp_path):
        path = tmp_path / "broken.hdr"
        path.write_bytes(b"garbage")
        with pytest.raises(HDRFormatError, match="broken.hdr"):
            hdr_io.load_hdr(path)

    def test_missing_file_surfaces_path(self, tmp_path):
        with pytest.raises(OSError, match="nope.hdr"):
            hdr_io.load_hdr(tmp_path / "nope.hdr")

    def test_png_exports(self, tmp_path):
        img = hdr_io.generate_synthetic_env(0)
        hdr_io.save_png_tonemapped(img, tmp_path / "a.png", exposure=0.5)
        arr = np.asarray(Image.open(tmp_path / "a.png"))
        assert arr.shape == (32, 64, 3) and arr.dtype == np.uint8

    def test_mask_png_zero_is_hidden(self, tmp_path):
        m = np.zeros((4, 8), dtype=np.uint8)
        m[:2] = 255
        Image.fromarray(m).save(tmp_path / "m.png")
        mask = hdr_io.load_mask_png(tmp_path / "m.png")
        assert mask[:2].all() and not mask[2:].any()

    def test_mask_shape_checked(self):
        with pytest.raises(ValueError):
            EnvironmentImage(np.ones((4, 8, 3)), mask=np.ones((4, 4), dtype=bool))


class TestSynthetic:
    def test_deterministic(self):
        a, b = hdr_io.generate_synthetic_env(3), hdr_io.generate_synthetic_env(3)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_different_seeds_differ(self):
        assert not np.array_equal(hdr_io.generate_synthetic_env(1).pixels, hdr_io.generate_synthetic_env(2).pixels)

    @pytest.mark.parametrize("seed", range(40))
    def test_hdr_peak_and_lit_from_above(self, seed):
        img = hdr_io.generate_synthetic_env(seed)
        lum = _luminance(img.pixels)
        assert lum.max() / np.median(lum) > 50
        assert lum[-1].mean() < lum[: img.height // 2].mean()

    def test_sun_in_upper_hemisphere(self):
        for seed in range(20):
            img = hdr_io.generate_synthetic_env(seed, 16, 32)
            r, _ = np.unravel_index(np.argmax(_luminance(img.pixels)), (16, 32))
            assert r < 8
            assert img.meta["sun_direction"][1] > 0

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            hdr_io.generate_synthetic_env(0, 4, 8)


class TestAugment:
    @pytest.fixture
    def image(self):
        img = hdr_io.generate_synthetic_env(5, 16, 32)
        mask = np.zeros((16, 32), dtype=bool)
        mask[:, :7] = True
        return img.with_mask(mask)

    def test_hflip_involution(self, image):
        twice = hdr_io.augment(hdr_io.augment(image, "hflip"), "hflip")
        np.testing.assert_array_equal(twice.pixels, image.pixels)
        np.testing.assert_array_equal(twice.mask, image.mask)

    def test_full_turn_identity(self, image):
        np.testing.assert_array_equal(hdr_io.augment(image, "az_rotate", image.width).pixels, image.pixels)

    @pytest.mark.parametrize("k", [0, 1, 5, 31])
    def test_rotation_and_flip_commute_with_sign_change(self, image, k):
        a = hdr_io.hflip(hdr_io.az_rotate(image, k))
        b = hdr_io.az_rotate(hdr_io.hflip(image), -k)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    @pytest.mark.parametrize("kind,k", [("hflip", 0), ("az_rotate", 3)])
    def test_energy_preserved(self, image, kind, k):
        out = hdr_io.augment(image, kind, k)
        assert out.pixels.astype(np.float64).sum() == image.pixels.astype(np.float64).sum()

    @pytest.mark.parametrize("k", [1, 4, 13])
    def test_column_shift_is_a_rotation_about_y(self, image, k):
        rotated = hdr_io.rotate_environment(image, hdr_io.az_rotation_matrix(k, image.width))
        np.testing.assert_allclose(rotated.pixels, hdr_io.az_rotate(image, k).pixels, rtol=1e-5, atol=1e-6)

    def test_unknown_kind(self, image):
        with pytest.raises(ValueError):
            hdr_io.augment(image, "vflip")


class TestLookup:
    def test_pixel_centres_are_exact(self, rng):
        pixels = rng.uniform(0, 5, size=(8, 16, 3))
        d = geometry.equirect_directions(8, 16)
        np.testing.assert_allclose(hdr_io.bilinear_lookup(pixels, d), pixels, atol=1e-12)

    def test_azimuth_wraps(self):
        pixels = np.zeros((4, 8, 3))
        pixels[:, 0] = 1.0
        # halfway between the last and first column centres
        d = geometry.spherical_to_direction(math.pi * 1.5 / 4, 0.0)
        np.testing.assert_allclose(hdr_io.bilinear_lookup(pixels, d[None]), [[0.5, 0.5, 0.5]], atol=1e-12)

    def test_masked_lookup_ignores_hidden_corners(self, rng):
        pixels = np.ones((8, 16, 3))
        pixels[4:] = 50.0
        mask = np.zeros((8, 16), dtype=bool)
        mask[:4] = True
        d = geometry.sample_directions(2000, rng)
        d = d[hdr_io.nearest_mask(mask, d)]
        np.testing.assert_allclose(hdr_io.bilinear_lookup(pixels, d, mask), 1.0, atol=1e-12)

    def test_full_mask_matches_plain_lookup(self, rng):
        pixels = rng.uniform(0, 5, size=(8, 16, 3))
        d = geometry.sample_directions(100, rng)
        np.testing.assert_allclose(hdr_io.bilinear_lookup(pixels, d, np.ones((8, 16), dtype=bool)),
                                   hdr_io.bilinear_lookup(pixels, d), atol=1e-12)

    def test_rotation_by_identity(self):
        img = hdr_io.generate_synthetic_env(1, 16, 32)
        np.testing.assert_allclose(hdr_io.rotate_environment(img, np.eye(3)).pixels, img.pixels, rtol=1e-6)


class TestTrainingBatch:
    def test_constant_image(self):
        img = EnvironmentImage(np.full((8, 16, 3), 2.5))
        batch = hdr_io.sample_training_batch([img], 500, 0)
        np.testing.assert_allclose(batch.log_colors, math.log(2.5), rtol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(batch.directions, axis=-1), 1.0, atol=1e-12)

    def test_zero_pixels_hit_the_floor(self):
        img = EnvironmentImage(np.zeros((8, 16, 3)))
        batch = hdr_io.sample_training_batch([img], 10, 0)
        np.testing.assert_allclose(batch.log_colors, math.log(1e-8))

    def test_per_image_counts_follow_binomial_bound(self):
        images = [EnvironmentImage(np.full((8, 16, 3), i + 1.0)) for i in range(8)]
        counts = np.bincount(hdr_io.sample_training_batch(images, 4096, 2).image_index, minlength=8)
        assert counts.min() >= 300 and counts.max() <= 800
        # Binomial(4096, 1/8) puts essentially no mass outside [300, 800]
        tail = 1 - stats.binom(4096, 1 / 8).cdf(800) + stats.binom(4096, 1 / 8).cdf(299)
        assert 8 * tail < 1e-3

    def test_colours_belong_to_their_image(self):
        images = [EnvironmentImage(np.full((8, 16, 3), v)) for v in (1.0, 10.0, 100.0)]
        batch = hdr_io.sample_training_batch(images, 300, 4)
        np.testing.assert_allclose(batch.log_colors[:, 0], np.log([1.0, 10.0, 100.0])[batch.image_index], rtol=1e-6, atol=1e-12)

    def test_masked_pixels_never_sampled(self):
        pixels = np.ones((16, 32, 3))
        pixels[8:] = 7.0
        mask = np.zeros((16, 32), dtype=bool)
        mask[8:] = True  # only the lower half is observed
        batch = hdr_io.sample_training_batch([EnvironmentImage(pixels, mask)], 2000, 1)
        r, c = geometry.direction_to_pixel(batch.directions, 16, 32)
        assert np.all(np.round(r) >= 8)

    def test_fully_masked_image_rejected(self):
        img = EnvironmentImage(np.ones((8, 16, 3)), np.zeros((8, 16), dtype=bool))
        with pytest.raises(ValueError, match="masked"):
            hdr_io.sample_training_batch([img], 10, 0)

    def test_polar_distribution(self):
        img = EnvironmentImage(np.ones((8, 16, 3)))
        phi, _ = geometry.direction_to_spherical(hdr_io.sample_training_batch([img], 50_000, 9).directions)
        edges = np.linspace(0, math.pi, 17)
        observed, _ = np.histogram(phi, edges)
        expected = 0.5 * (np.cos(edges[:-1]) - np.cos(edges[1:])) * len(phi)
        assert stats.chisquare(observed, expected).pvalue > 0.01

    def test_seeded(self):
        img = hdr_io.generate_synthetic_env(0)
        a = hdr_io.sample_training_batch([img], 64, 3)
        b = hdr_io.sample_training_batch([img], 64, 3)
        np.testing.assert_array_equal(a.directions, b.directions)
        np.testing.assert_array_equal(a.log_colors, b.log_colors)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            hdr_io.sample_training_batch([], 10, 0)
        with pytest.raises(ValueError):
            hdr_io.sample_training_batch([hdr_io.generate_synthetic_env(0)], 0, 0)
