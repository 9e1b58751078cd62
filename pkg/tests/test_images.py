import math

import numpy as np
import pytest

from noiselab.images import (
    DimensionError,
    GradientField,
    Image,
    ParameterError,
    crop_random,
    gradient,
    median_filter,
    psnr,
    read_png,
    ssim,
    write_png,
)
from oracles import gradient_loop, median_loop, psnr_loop


def rand_image(rng, h=16, w=16, c=1):
    return Image(rng.random((h, w, c), dtype=np.float32) if c else rng.random((h, w), dtype=np.float32))


class TestImageType:
    def test_promotes_2d_to_single_channel(self):
        img = Image(np.zeros((4, 5), dtype=np.float32))
        assert img.data.shape == (4, 5, 1)
        assert (img.height, img.width, img.channels) == (4, 5, 1)

    def test_rejects_bad_channel_count(self):
        with pytest.raises(DimensionError):
            Image(np.zeros((4, 4, 2), dtype=np.float32))

    def test_rejects_non_finite(self):
        bad = np.zeros((4, 4, 1), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ParameterError):
            Image(bad)

    def test_clamp(self):
        img = Image(np.array([[[-0.5], [0.5]], [[1.5], [1.0]]], dtype=np.float32))
        clamped = img.clamp()
        assert clamped.data.min() == 0.0 and clamped.data.max() == 1.0


class TestGradient:
    def test_matches_loop_oracle_bit_exactly(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            img = rand_image(rng)
            field = gradient(img)
            dx, dy = gradient_loop(img.data)
            assert np.array_equal(field.dx, dx)
            assert np.array_equal(field.dy, dy)

    def test_trailing_edges_are_zero(self):
        rng = np.random.default_rng(12)
        field = gradient(rand_image(rng, 7, 9))
        assert np.all(field.dx[:, -1, :] == 0)
        assert np.all(field.dy[-1, :, :] == 0)

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(13)
        img = rand_image(rng)
        shifted = Image(img.data + np.float32(0.25))
        f0, f1 = gradient(img), gradient(shifted)
        assert np.allclose(f0.dx, f1.dx, atol=1e-6)
        assert np.allclose(f0.dy, f1.dy, atol=1e-6)

    def test_returns_gradient_field(self):
        rng = np.random.default_rng(14)
        assert isinstance(gradient(rand_image(rng)), GradientField)


class TestMedianFilter:
    @pytest.mark.parametrize("kernel", [3, 31])
    def test_matches_brute_force(self, kernel):
        rng = np.random.default_rng(21)
        for _ in range(3):
            img = rand_image(rng, 32, 32)
            fast = median_filter(img, kernel)
            slow = median_loop(img.data, kernel)
            assert np.array_equal(fast.data, slow)

    def test_color_channels_independent(self):
        rng = np.random.default_rng(22)
        img = rand_image(rng, 16, 16, 3)
        full = median_filter(img, 3)
        for c in range(3):
            mono = median_filter(Image(img.data[:, :, c]), 3)
            assert np.array_equal(full.data[:, :, c : c + 1], mono.data)

    def test_even_kernel_rejected(self):
        with pytest.raises(ParameterError):
            median_filter(Image(np.zeros((8, 8), dtype=np.float32)), 4)

    def test_constant_image_fixed_point(self):
        img = Image(np.full((12, 12, 1), 0.37, dtype=np.float32))
        assert np.array_equal(median_filter(img, 5).data, img.data)


class TestPsnr:
    def test_uniform_difference_closed_form(self):
        a = Image(np.full((32, 32, 1), 0.5))
        b = Image(np.full((32, 32, 1), 0.6))
        assert abs(psnr(a, b) - 20.0) < 1e-6

    def test_identical_images_infinite(self):
        a = Image(np.full((8, 8, 1), 0.3, dtype=np.float32))
        assert psnr(a, a) == math.inf

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(31)
        a, b = rand_image(rng), rand_image(rng)
        assert abs(psnr(a, b) - psnr_loop(a.data, b.data)) < 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            psnr(Image(np.zeros((8, 8), dtype=np.float32)), Image(np.zeros((9, 8), dtype=np.float32)))


class TestSsim:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(41)
        img = rand_image(rng, 24, 24)
        assert abs(ssim(img, img) - 1.0) < 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(42)
        a, b = rand_image(rng, 24, 24), rand_image(rng, 24, 24)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-9

    def test_noise_reduces_similarity(self):
        rng = np.random.default_rng(43)
        base = np.tile(np.linspace(0.2, 0.8, 24, dtype=np.float32), (24, 1))[:, :, None]
        a = Image(base)
        b = Image(np.clip(base + rng.normal(0, 0.1, base.shape).astype(np.float32), 0, 1))
        s = ssim(a, b)
        assert 0.0 < s < 0.95

    def test_color_uses_luma(self):
        rng = np.random.default_rng(44)
        mono = rand_image(rng, 24, 24, 1)
        tri = Image(np.repeat(mono.data, 3, axis=2))
        assert abs(ssim(tri, tri) - 1.0) < 1e-9
        noisy = Image(np.clip(tri.data + rng.normal(0, 0.05, tri.data.shape).astype(np.float32), 0, 1))
        assert ssim(tri, noisy) < 1.0

    def test_window_too_large_rejected(self):
        small = Image(np.zeros((8, 8), dtype=np.float32))
        with pytest.raises(DimensionError):
            ssim(small, small)


class TestCropAndPng:
    def test_crop_random_deterministic(self):
        rng_a = np.random.default_rng(51)
        rng_b = np.random.default_rng(51)
        img = rand_image(np.random.default_rng(0), 32, 32)
        a = crop_random(img, 16, rng_a)
        b = crop_random(img, 16, rng_b)
        assert np.array_equal(a.data, b.data)
        assert a.data.shape == (16, 16, 1)

    def test_crop_full_size_is_identity(self):
        img = rand_image(np.random.default_rng(1), 16, 16)
        crop = crop_random(img, 16, np.random.default_rng(0))
        assert np.array_equal(crop.data, img.data)

    def test_crop_too_large_rejected(self):
        img = rand_image(np.random.default_rng(2), 8, 8)
        with pytest.raises(DimensionError):
            crop_random(img, 9, np.random.default_rng(0))

    def test_png_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(52)
        img = rand_image(rng, 16, 16, 3)
        path = tmp_path / "x.png"
        write_png(img, path)
        back = read_png(path)
        quantized = np.rint(img.data * 255.0) / 255.0
        assert np.array_equal(back.data, quantized)

    def test_png_write_is_byte_deterministic(self, tmp_path):
        img = rand_image(np.random.default_rng(53), 16, 16)
        write_png(img, tmp_path / "a.png")
        write_png(img, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
