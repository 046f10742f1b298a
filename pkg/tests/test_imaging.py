import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellcount import imaging
from cellcount.errors import AnnotationError, ImageFormatError, ParameterError


class TestGaussianKernel:
    def test_size_one_is_unit(self):
        k = imaging.gaussian_kernel(1, 1.0)
        assert np.array_equal(k.weights, [[1.0]])

    def test_default_kernel_normalized_with_central_peak(self):
        k = imaging.gaussian_kernel(5, 1.0)
        assert abs(k.weights.sum() - 1.0) <= 1e-12
        assert k.weights[2, 2] == k.weights.max()

    def test_huge_sigma_limit_is_uniform(self):
        k = imaging.gaussian_kernel(5, 1e9)
        np.testing.assert_allclose(k.weights, np.full((5, 5), 1 / 25), atol=1e-12)

    def test_rotation_symmetry(self):
        k = imaging.gaussian_kernel(7, 1.7)
        np.testing.assert_array_equal(k.weights, np.rot90(k.weights))

    @pytest.mark.parametrize("size,sigma", [(4, 1.0), (0, 1.0), (-3, 1.0), (5, 0.0), (5, -1.0)])
    def test_invalid_parameters(self, size, sigma):
        with pytest.raises(ParameterError):
            imaging.gaussian_kernel(size, sigma)


class TestDensityFromDots:
    def test_no_dots_gives_zero_map(self):
        d = imaging.density_from_dots([], (14, 14), (224, 224))
        assert d.total() == 0.0
        assert not d.values.any()

    def test_interior_dots_conserve_count(self):
        rng = np.random.default_rng(0)
        dots = [(x, y) for x, y in zip(rng.uniform(80, 140, 10), rng.uniform(80, 140, 10))]
        d = imaging.density_from_dots(dots, (14, 14), (224, 224))
        assert abs(d.total() - 10.0) < 1e-9

    def test_corner_dot_renormalized(self):
        kernel = imaging.gaussian_kernel(5, 1.0)
        d = imaging.density_from_dots([(0.0, 0.0)], (14, 14), (224, 224), kernel)
        assert abs(d.total() - 1.0) < 1e-9
        # Independent check: the surviving quadrant, renormalized by its own mass.
        quadrant = kernel.weights[2:, 2:]
        np.testing.assert_allclose(d.values[:3, :3], quadrant / quadrant.sum(), atol=1e-12)
        assert not d.values[3:, :].any() and not d.values[:, 3:].any()

    def test_out_of_bounds_dot_names_index(self):
        with pytest.raises(AnnotationError, match="dot 1"):
            imaging.density_from_dots([(5.0, 5.0), (250.0, 5.0)], (14, 14), (224, 224))

    def test_scale_covariance(self):
        rng = np.random.default_rng(1)
        dots = list(zip(rng.uniform(0, 100, 20), rng.uniform(0, 80, 20)))
        base = imaging.density_from_dots(dots, (10, 8), (100, 80))
        for factor in (2.0, 0.5):
            scaled = [(x * factor, y * factor) for x, y in dots]
            d = imaging.density_from_dots(scaled, (10, 8), (100 * factor, 80 * factor))
            np.testing.assert_array_equal(d.values, base.values)

    def test_centered_dot_flip_symmetric(self):
        d = imaging.density_from_dots([(7.3, 7.3)], (15, 15), (15, 15))
        np.testing.assert_array_equal(d.values, np.fliplr(d.values))
        np.testing.assert_array_equal(d.values, np.flipud(d.values))

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.floats(min_value=0, max_value=100, exclude_max=True, allow_nan=False),
                st.floats(min_value=0, max_value=80, exclude_max=True, allow_nan=False),
            ),
            max_size=40,
        )
    )
    def test_count_conservation_property(self, dots):
        d = imaging.density_from_dots(dots, (8, 6), (100, 80))
        n = len(dots)
        assert abs(d.total() - n) < 1e-9 * max(1, n)
        assert d.values.min() >= 0.0


class TestResizeBilinear:
    def test_same_size_identity(self):
        rng = np.random.default_rng(2)
        img = imaging.GrayImage(rng.uniform(0, 1, (6, 9)))
        out = imaging.resize_bilinear(img, 9, 6)
        np.testing.assert_allclose(out.pixels, img.pixels, atol=1e-12)

    def test_constant_image_stays_constant(self):
        img = imaging.GrayImage(np.full((5, 7), 0.4))
        out = imaging.resize_bilinear(img, 13, 3)
        np.testing.assert_allclose(out.pixels, 0.4, atol=1e-12)

    def test_checkerboard_hand_oracle(self):
        # Hand evaluation of the half-pixel-centered interpolation formula
        # for a 2x2 [[0,1],[1,0]] board upsampled to 4x4.
        img = imaging.GrayImage([[0.0, 1.0], [1.0, 0.0]])
        expected = np.array(
            [
                [0.0, 0.25, 0.75, 1.0],
                [0.25, 0.375, 0.625, 0.75],
                [0.75, 0.625, 0.375, 0.25],
                [1.0, 0.75, 0.25, 0.0],
            ]
        )
        out = imaging.resize_bilinear(img, 4, 4)
        np.testing.assert_allclose(out.pixels, expected, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(min_value=1, max_value=9),
        st.integers(min_value=1, max_value=9),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    def test_output_range_within_input_range(self, w, h, seed):
        rng = np.random.default_rng(seed)
        img = imaging.GrayImage(rng.uniform(0.2, 0.8, (3, 4)))
        out = imaging.resize_bilinear(img, w, h)
        assert out.pixels.min() >= img.pixels.min()
        assert out.pixels.max() <= img.pixels.max()

    def test_bad_target_size(self):
        img = imaging.GrayImage([[0.5]])
        with pytest.raises(ParameterError):
            imaging.resize_bilinear(img, 0, 4)


class TestPgmIO:
    def test_read_binary_fixture(self):
        data = b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64])
        img = imaging.read_image(data)
        np.testing.assert_allclose(
            img.pixels, [[0.0, 1.0], [128 / 255, 64 / 255]], atol=1e-15
        )

    def test_read_ascii_with_comment(self):
        data = b"P2\n# synthetic fixture\n3 1\n10\n0 5 10\n"
        img = imaging.read_image(data)
        np.testing.assert_allclose(img.pixels, [[0.0, 0.5, 1.0]])

    def test_sixteen_bit_round_trip(self):
        rng = np.random.default_rng(3)
        img = imaging.GrayImage(rng.integers(0, 65536, (4, 5)) / 65535.0)
        back = imaging.read_image(imaging.write_pgm(img, maxval=65535))
        np.testing.assert_allclose(back.pixels, img.pixels, atol=1e-12)

    def test_write_read_preserves_argmax(self):
        rng = np.random.default_rng(4)
        d = imaging.DensityMap(rng.uniform(0, 3, (7, 7)))
        path_bytes = imaging.write_pgm(
            imaging.GrayImage(d.values / d.values.max())
        )
        back = imaging.read_image(path_bytes)
        assert np.argmax(back.pixels) == np.argmax(d.values)

    def test_heatmap_of_zero_map_is_zero(self, tmp_path):
        target = tmp_path / "zero.pgm"
        imaging.write_heatmap(imaging.DensityMap(np.zeros((3, 3))), target)
        img = imaging.read_image(target.read_bytes())
        assert not img.pixels.any()

    def test_heatmap_clamps_negatives(self, tmp_path):
        target = tmp_path / "neg.pgm"
        imaging.write_heatmap(imaging.DensityMap([[-1.0, 2.0], [0.5, 0.0]]), target)
        img = imaging.read_image(target.read_bytes())
        assert img.pixels[0, 0] == 0.0
        assert img.pixels[0, 1] == 1.0

    def test_truncated_binary_rejected(self):
        with pytest.raises(ImageFormatError, match="truncated"):
            imaging.read_image(b"P5\n4 4\n255\n\x00\x01")

    def test_unknown_magic_rejected(self):
        with pytest.raises(ImageFormatError, match="unsupported"):
            imaging.read_image(b"GIF89a....")

    def test_non_numeric_ascii_rejected(self):
        with pytest.raises(ImageFormatError):
            imaging.read_image(b"P2\n2 1\n255\n12 xy\n")

    def test_png_round_trip(self):
        PIL = pytest.importorskip("PIL.Image")
        import io

        rng = np.random.default_rng(5)
        arr = rng.integers(0, 256, (6, 4), dtype=np.uint8)
        buf = io.BytesIO()
        PIL.fromarray(arr, mode="L").save(buf, format="PNG")
        img = imaging.read_image(buf.getvalue())
        np.testing.assert_allclose(img.pixels, arr / 255.0, atol=1e-15)


class TestDensityCsv:
    def test_round_trip(self):
        rng = np.random.default_rng(6)
        d = imaging.DensityMap(rng.uniform(0, 2, (3, 5)))
        back = imaging.read_density_csv(imaging.write_density_csv(d))
        assert back.width == 5 and back.height == 3
        np.testing.assert_array_equal(back.values, d.values)

    def test_header_reports_size(self):
        d = imaging.DensityMap(np.zeros((2, 4)))
        assert imaging.write_density_csv(d).splitlines()[0] == "4,2"

    def test_wrong_count_rejected(self):
        with pytest.raises(ParameterError):
            imaging.read_density_csv("2,2\n1.0\n2.0\n3.0\n")
