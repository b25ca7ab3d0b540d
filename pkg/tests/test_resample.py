import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import ResampleError
from app.core.images import ImageTensor
from app.core.resample import (
    BILINEAR,
    KEYS,
    MITCHELL,
    NEAREST,
    KernelSpec,
    degrade_4x,
    kernel_weight,
    resize,
    upscale_4x,
    weight_matrix,
)

LANCZOS3 = KernelSpec(family="lanczos", lobes=3)
ALL_KERNELS = [NEAREST, BILINEAR, KEYS, MITCHELL, LANCZOS3]


def axis_weights(weight_fn, in_size: int, out_size: int) -> np.ndarray:
    """Independent per-axis weights: pixel-centre mapping, stretched kernel, renormalized."""
    scale = in_size / out_size
    stretch = max(scale, 1.0)
    rows = []
    for d in range(out_size):
        center = (d + 0.5) * scale - 0.5
        w = np.array([weight_fn((i - center) / stretch) for i in range(in_size)])
        rows.append(w / w.sum())
    return np.array(rows)


def separable_oracle(image: np.ndarray, weight_fn, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = image.shape
    wy = axis_weights(weight_fn, h, out_h)
    wx = axis_weights(weight_fn, w, out_w)
    out = np.zeros((c, out_h, out_w))
    for ch in range(c):
        for y in range(out_h):
            for x in range(out_w):
                out[ch, y, x] = sum(
                    wy[y, i] * wx[x, j] * image[ch, i, j] for i in range(h) for j in range(w)
                )
    return out


def keys_reference(x: float) -> float:
    x = abs(x)
    if x < 1:
        return 1.5 * x ** 3 - 2.5 * x ** 2 + 1
    if x < 2:
        return -0.5 * x ** 3 + 2.5 * x ** 2 - 4 * x + 2
    return 0.0


def mitchell_reference(x: float, b: float = 1 / 3, c: float = 1 / 3) -> float:
    x = abs(x)
    if x < 1:
        return ((12 - 9 * b - 6 * c) * x ** 3 + (-18 + 12 * b + 6 * c) * x ** 2 + (6 - 2 * b)) / 6
    if x < 2:
        return ((-b - 6 * c) * x ** 3 + (6 * b + 30 * c) * x ** 2 + (-12 * b - 48 * c) * x + (8 * b + 24 * c)) / 6
    return 0.0


def lanczos3_reference(x: float) -> float:
    return float(np.sinc(x) * np.sinc(x / 3)) if abs(x) < 3 else 0.0


REFERENCE_KERNELS = {
    "nearest": (NEAREST, lambda x: 1.0 if abs(x) < 0.5 else 0.0),
    "bilinear": (BILINEAR, lambda x: max(0.0, 1.0 - abs(x))),
    "keys_bicubic": (KEYS, keys_reference),
    "mitchell_netravali": (MITCHELL, mitchell_reference),
    "lanczos": (LANCZOS3, lanczos3_reference),
}


class TestKernels:
    def test_keys_knots(self):
        assert kernel_weight(KEYS, 0.0) == 1.0
        assert kernel_weight(KEYS, 1.0) == pytest.approx(0.0, abs=1e-12)
        assert kernel_weight(KEYS, 2.0) == 0.0
        assert kernel_weight(KEYS, 0.5) == pytest.approx(0.5625)

    def test_mitchell_knots(self):
        assert kernel_weight(MITCHELL, 0.0) == pytest.approx(8.0 / 9.0)
        assert kernel_weight(MITCHELL, 1.0) == pytest.approx(1.0 / 18.0)
        assert kernel_weight(MITCHELL, 2.0) == 0.0

    @pytest.mark.parametrize("lobes", [2, 3, 4])
    def test_lanczos_is_interpolating(self, lobes):
        spec = KernelSpec(family="lanczos", lobes=lobes)
        assert kernel_weight(spec, 0.0) == 1.0
        for k in range(1, lobes):
            assert kernel_weight(spec, float(k)) == pytest.approx(0.0, abs=1e-12)
        assert kernel_weight(spec, float(lobes)) == 0.0

    def test_kernels_are_symmetric(self):
        for spec in ALL_KERNELS:
            for x in (0.3, 0.75, 1.4):
                assert kernel_weight(spec, x) == kernel_weight(spec, -x)

    def test_lanczos_lobes_are_limited(self):
        with pytest.raises(ValidationError):
            KernelSpec(family="lanczos", lobes=5)

    def test_labels(self):
        assert KEYS.label() == "keys(a=-0.5)"
        assert MITCHELL.label() == "mitchell(B=0.3333,C=0.3333)"
        assert LANCZOS3.label() == "lanczos(3)"
        assert BILINEAR.label() == "bilinear"


class TestWeightMatrix:
    @pytest.mark.parametrize("spec", ALL_KERNELS, ids=lambda s: s.family)
    @pytest.mark.parametrize("sizes", [(8, 2), (3, 12), (5, 5), (7, 3)])
    def test_rows_sum_to_one(self, spec, sizes):
        np.testing.assert_allclose(weight_matrix(spec, *sizes).sum(axis=1), 1.0)

    def test_nearest_same_size_is_identity(self):
        np.testing.assert_array_equal(weight_matrix(NEAREST, 6, 6), np.eye(6))

    def test_keys_shrink_matches_stretched_kernel(self):
        np.testing.assert_allclose(weight_matrix(KEYS, 8, 2), axis_weights(keys_reference, 8, 2), atol=1e-12)


class TestResize:
    @pytest.mark.parametrize("spec", ALL_KERNELS, ids=lambda s: s.family)
    def test_constant_image_stays_constant(self, spec):
        image = ImageTensor(np.full((3, 12, 20), 77.0))
        for out_w, out_h in ((5, 3), (40, 24), (20, 12)):
            out = resize(image, out_w, out_h, spec)
            np.testing.assert_allclose(out.data, 77.0, atol=1e-6)

    def test_nearest_same_size_is_exact(self, byte_image):
        image = byte_image(9, 7)
        np.testing.assert_array_equal(resize(image, 7, 9, NEAREST).data, image.data)

    @pytest.mark.parametrize("family", sorted(REFERENCE_KERNELS))
    @pytest.mark.parametrize(
        "in_hw,out_hw",
        [((2, 2), (4, 4)), ((3, 4), (12, 16)), ((5, 7), (9, 3)), ((8, 6), (2, 3)), ((9, 5), (4, 10))],
        ids=["up_even", "up_mixed", "up_and_down", "down_even", "down_odd"],
    )
    def test_matches_brute_force(self, family, in_hw, out_hw):
        spec, reference = REFERENCE_KERNELS[family]
        data = np.random.default_rng(sum(in_hw + out_hw)).uniform(0, 255, (2,) + in_hw)
        out = resize(ImageTensor(data), out_hw[1], out_hw[0], spec)
        np.testing.assert_allclose(out.data, separable_oracle(data, reference, *out_hw), atol=1e-9)

    @pytest.mark.parametrize("spec", [BILINEAR, KEYS, MITCHELL, LANCZOS3], ids=lambda s: s.family)
    @pytest.mark.parametrize("out_hw", [(13, 21), (4, 3)])
    def test_mirroring_commutes_with_resizing(self, spec, out_hw, byte_image):
        image = byte_image(7, 10)
        mirrored = image.derive(image.data[:, :, ::-1].copy())
        out = resize(image, out_hw[1], out_hw[0], spec)
        np.testing.assert_allclose(resize(mirrored, out_hw[1], out_hw[0], spec).data, out.data[:, :, ::-1], atol=1e-6)

    @pytest.mark.parametrize("spec", [NEAREST, BILINEAR], ids=lambda s: s.family)
    @pytest.mark.parametrize("out_hw", [(17, 23), (3, 5), (6, 20)])
    def test_nonnegative_kernels_stay_in_input_range(self, spec, out_hw, rng):
        data = rng.uniform(40, 200, (3, 9, 11))
        out = resize(ImageTensor(data), out_hw[1], out_hw[0], spec).data
        assert out.min() >= data.min() - 1e-9
        assert out.max() <= data.max() + 1e-9

    def test_non_square_output_shape(self, byte_image):
        out = resize(byte_image(10, 6), 15, 4, MITCHELL)
        assert out.shape == (3, 4, 15)

    def test_clip_keeps_convention_range(self):
        data = np.zeros((1, 8, 8))
        data[:, :, 4:] = 255.0
        image = ImageTensor(data)
        unclipped = resize(image, 32, 32, LANCZOS3)
        clipped = resize(image, 32, 32, LANCZOS3, clip=True)
        assert unclipped.data.max() > 255.0 or unclipped.data.min() < 0.0
        assert clipped.data.min() >= 0.0 and clipped.data.max() <= 255.0

    def test_zero_target_size(self, byte_image):
        with pytest.raises(ResampleError):
            resize(byte_image(4, 4), 0, 4)


class TestDegradeAndUpscale:
    def test_chip_sizes(self):
        hr = ImageTensor(np.zeros((3, 320, 320)))
        lr = degrade_4x(hr)
        assert lr.shape == (3, 80, 80)
        assert lr.provenance["degradation"] == "keys(a=-0.5)"
        assert upscale_4x(lr).shape == (3, 320, 320)

    def test_checkerboard_matches_brute_force(self):
        cells = (np.indices((8, 8)).sum(axis=0) % 2) * 255.0
        hr = ImageTensor(cells[None].astype(np.float64))
        lr = degrade_4x(hr, KEYS)
        assert lr.shape == (1, 2, 2)
        np.testing.assert_allclose(lr.data, separable_oracle(hr.data, keys_reference, 2, 2), atol=1e-9)

    def test_checkerboard_averages_out(self):
        cells = (np.indices((16, 16)).sum(axis=0) % 2) * 255.0
        lr = degrade_4x(ImageTensor(cells[None].astype(np.float64)))
        interior = lr.data[0, 1:-1, 1:-1]
        np.testing.assert_allclose(interior, 127.5, atol=1.0)

    def test_mitchell_upscale_matches_brute_force(self):
        data = np.random.default_rng(4).uniform(0, 255, (2, 3, 4))
        sr = upscale_4x(ImageTensor(data), MITCHELL, clip=False)
        assert sr.shape == (2, 12, 16)
        np.testing.assert_allclose(sr.data, separable_oracle(data, mitchell_reference, 12, 16), atol=1e-9)

    def test_requires_divisible_size(self):
        with pytest.raises(ResampleError):
            degrade_4x(ImageTensor(np.zeros((3, 10, 12))))

    def test_upscale_defaults_to_mitchell_and_clips(self, byte_image):
        sr = upscale_4x(byte_image(5, 5))
        assert sr.provenance["upscale"] == MITCHELL.label()
        assert sr.data.min() >= 0.0 and sr.data.max() <= 255.0
        assert sr.width == 20
