import numpy as np
import pytest

from grfface.imgcore import (
    IntegralImage,
    Kernel2D,
    as_plane,
    convolve,
    integral,
    read_pgm,
    read_plane,
    write_pgm,
    write_plane,
)


def conv2d_oracle(image, taps, border="replicate"):
    """Brute-force 2-D convolution with explicit border index arithmetic."""
    h, w = image.shape
    r = taps.shape[0] // 2
    out = np.zeros_like(image, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    sy, sx = y - dy, x - dx
                    if border == "replicate":
                        sy = min(max(sy, 0), h - 1)
                        sx = min(max(sx, 0), w - 1)
                    else:  # reflect about the boundary (half-sample)
                        sy = _reflect(sy, h)
                        sx = _reflect(sx, w)
                    acc += taps[dy + r, dx + r] * image[sy, sx]
            out[y, x] = acc
    return out


def _reflect(i, n):
    while i < 0 or i >= n:
        if i < 0:
            i = -i - 1
        if i >= n:
            i = 2 * n - i - 1
    return i


def random_separable_kernel(rng, r):
    fy = rng.normal(size=2 * r + 1)
    fx = rng.normal(size=2 * r + 1)
    return Kernel2D(np.outer(fy, fx), factors=(fy, fx))


class TestAsPlane:
    def test_flat_values_reshape(self):
        plane = as_plane([1, 2, 3, 4, 5, 6], width=3, height=2)
        assert plane.shape == (2, 3)
        assert plane[1, 2] == 6

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            as_plane(np.array([[1.0, np.nan]]))

    def test_rejects_bad_length(self):
        with pytest.raises(ValueError):
            as_plane([1, 2, 3], width=2, height=2)


class TestConvolve:
    def test_delta_reproduces_taps(self):
        rng = np.random.default_rng(0)
        taps = rng.normal(size=(5, 5))
        img = np.zeros((11, 11))
        img[5, 5] = 1.0
        out = convolve(img, Kernel2D(taps))
        assert np.allclose(out[3:8, 3:8], taps, atol=1e-12)

    def test_constant_image_scales_by_tap_sum(self):
        rng = np.random.default_rng(1)
        kern = Kernel2D(rng.normal(size=(3, 3)))
        img = np.full((8, 8), 2.5)
        out = convolve(img, kern)
        assert np.allclose(out, 2.5 * kern.taps.sum(), atol=1e-12)

    def test_matches_bruteforce_oracle_separable(self):
        rng = np.random.default_rng(2)
        img = rng.normal(size=(16, 16))
        kern = random_separable_kernel(rng, 2)
        ref = conv2d_oracle(img, kern.taps)
        out = convolve(img, kern)
        assert np.max(np.abs(out - ref)) / np.max(np.abs(ref)) < 1e-9

    @pytest.mark.parametrize("border", ["replicate", "reflect"])
    def test_matches_bruteforce_oracle_direct(self, border):
        rng = np.random.default_rng(3)
        img = rng.normal(size=(12, 14))
        taps = rng.normal(size=(5, 5))
        ref = conv2d_oracle(img, taps, border)
        out = convolve(img, Kernel2D(taps), border=border)
        assert np.max(np.abs(out - ref)) < 1e-9 * np.max(np.abs(ref))

    def test_separable_equals_direct(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            img = rng.normal(size=(20, 20))
            kern = random_separable_kernel(rng, rng.integers(1, 4))
            sep = convolve(img, kern)
            direct = convolve(img, Kernel2D(kern.taps))
            assert np.max(np.abs(sep - direct)) / np.max(np.abs(direct)) < 1e-9

    def test_linearity(self):
        rng = np.random.default_rng(5)
        i1 = rng.normal(size=(10, 10))
        i2 = rng.normal(size=(10, 10))
        kern = Kernel2D(rng.normal(size=(3, 3)))
        a, b = 1.7, -0.3
        lhs = convolve(a * i1 + b * i2, kern)
        rhs = a * convolve(i1, kern) + b * convolve(i2, kern)
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_kernel_exceeds_image(self):
        with pytest.raises(ValueError, match="kernel-exceeds-image"):
            convolve(np.zeros((3, 3)), Kernel2D(np.zeros((5, 5))))

    def test_bad_border_policy(self):
        with pytest.raises(ValueError, match="border"):
            convolve(np.zeros((5, 5)), Kernel2D(np.zeros((3, 3))), border="wrap")

    def test_separable_factor_validation(self):
        with pytest.raises(ValueError, match="factors"):
            Kernel2D(np.ones((3, 3)), factors=(np.ones(3), 2 * np.ones(3)))


class TestIntegral:
    def test_all_ones_full_rect(self):
        table = integral(np.ones((2, 2)))
        assert table.rect_sum(0, 0, 2, 2) == 4.0

    def test_empty_rect_is_zero(self):
        table = integral(np.ones((4, 4)))
        assert table.rect_sum(2, 1, 2, 3) == 0.0

    def test_border_rows_zero(self):
        table = integral(np.random.default_rng(0).normal(size=(5, 7)))
        assert np.all(table.table[0, :] == 0)
        assert np.all(table.table[:, 0] == 0)

    def test_random_rects_match_naive(self):
        rng = np.random.default_rng(6)
        img = rng.normal(size=(32, 32))
        table = IntegralImage(img)
        for _ in range(100):
            x0, x1 = np.sort(rng.integers(0, 33, size=2))
            y0, y1 = np.sort(rng.integers(0, 33, size=2))
            naive = float(img[y0:y1, x0:x1].sum())
            got = table.rect_sum(x0, y0, x1, y1)
            assert abs(got - naive) <= 1e-9 * max(abs(naive), 1.0)


class TestFileFormats:
    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        img = rng.uniform(0, 1, size=(9, 13))
        path = tmp_path / "face.pgm"
        write_pgm(path, img)
        back = read_pgm(path)
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12

    def test_pgm_quantized_stable(self, tmp_path):
        img = np.linspace(0, 1, 64).reshape(8, 8)
        p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
        write_pgm(p1, img)
        write_pgm(p2, read_pgm(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_pgm_rejects_other_magic(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
        with pytest.raises(ValueError, match="magic"):
            read_pgm(path)

    def test_plane_round_trip_exact_in_f32(self, tmp_path):
        rng = np.random.default_rng(8)
        img = rng.normal(size=(6, 11)).astype(np.float32).astype(np.float64)
        path = tmp_path / "x.ipln"
        write_plane(path, img)
        assert np.array_equal(read_plane(path), img)
        assert path.read_bytes()[:4] == b"IPLN"
