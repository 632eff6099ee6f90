import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softseg.errors import PaletteError
from softseg.palette import (Palette, extract_palette, kmeans_iterate,
                             kmeans_objective)


class TestPaletteType:
    def test_bounds_enforced(self):
        with pytest.raises(PaletteError):
            Palette(np.array([[1.2, 0.0, 0.0]], np.float32))
        with pytest.raises(PaletteError):
            Palette(np.zeros((17, 3), np.float32))
        with pytest.raises(PaletteError):
            Palette(np.zeros((0, 3), np.float32))

    def test_order_preserved(self):
        colors = np.array([[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]], np.float32)
        p = Palette(colors)
        np.testing.assert_array_equal(p.colors, colors)


class TestExtractPalette:
    def test_uniform_gray_duplicates_center(self):
        image = np.full((8, 8, 3), 0.5, np.float32)
        with pytest.warns(UserWarning, match="distinct"):
            palette = extract_palette(image, 3, seed=0)
        assert len(palette) == 3
        np.testing.assert_allclose(palette.colors, 0.5, atol=1e-6)

    def test_two_color_image(self):
        image = np.zeros((4, 8, 3), np.float32)
        image[:, :5] = [1.0, 0.0, 0.0]
        image[:, 5:] = [0.0, 0.0, 1.0]
        palette = extract_palette(image, 2, seed=0)
        # population order: red covers five columns of eight
        np.testing.assert_allclose(palette.colors[0], [1, 0, 0], atol=1e-6)
        np.testing.assert_allclose(palette.colors[1], [0, 0, 1], atol=1e-6)

    def test_k1_returns_mean(self, rng):
        image = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        palette = extract_palette(image, 1, seed=3)
        np.testing.assert_allclose(palette.colors[0],
                                   image.reshape(-1, 3).mean(axis=0), atol=1e-6)

    def test_seed_deterministic(self, rng):
        image = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        a = extract_palette(image, 5, seed=42)
        b = extract_palette(image, 5, seed=42)
        np.testing.assert_array_equal(a.colors, b.colors)

    def test_pixel_order_invariant(self, rng):
        image = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        shuffled = image.reshape(-1, 3)[rng.permutation(256)].reshape(16, 16, 3)
        a = extract_palette(image, 4, seed=7)
        b = extract_palette(shuffled, 4, seed=7)
        np.testing.assert_allclose(a.colors, b.colors, atol=1e-7)

    def test_output_satisfies_invariants(self, rng):
        image = rng.uniform(0, 1, (20, 20, 3)).astype(np.float32)
        palette = extract_palette(image, 6, seed=1)
        assert len(palette) == 6
        assert palette.source == "auto"
        assert palette.colors.min() >= 0 and palette.colors.max() <= 1

    def test_invalid_k(self, rng):
        image = rng.uniform(0, 1, (4, 4, 3)).astype(np.float32)
        with pytest.raises(PaletteError):
            extract_palette(image, 0)
        with pytest.raises(PaletteError):
            extract_palette(image, 17)


class TestKmeansIterate:
    def test_fixed_point_at_optimum(self):
        points = np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 0]], np.float64)
        centers = np.array([[0.0, 0.5, 0.0], [1.0, 0.5, 0.0]])
        new = kmeans_iterate(points, centers)
        np.testing.assert_allclose(new, centers, atol=1e-12)
        assert kmeans_objective(points, new) == pytest.approx(
            kmeans_objective(points, centers))

    def test_square_corners_converge_to_edge_midpoints(self):
        points = np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 0]], np.float64)
        centers = np.array([[0.2, 0.5, 0.0], [0.8, 0.5, 0.0]])
        for _ in range(5):
            centers = kmeans_iterate(points, centers)
        np.testing.assert_allclose(sorted(centers[:, 0]), [0.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(centers[:, 1], 0.5, atol=1e-12)

    def test_objective_never_increases(self, rng):
        for _ in range(100):
            n = int(rng.integers(3, 40))
            k = int(rng.integers(1, 5))
            points = rng.uniform(0, 1, (n, 3))
            centers = rng.uniform(0, 1, (k, 3))
            before = kmeans_objective(points, centers)
            after = kmeans_objective(points, kmeans_iterate(points, centers))
            assert after <= before + 1e-12

    def test_empty_cluster_reseeded(self):
        points = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.9, 0, 0]])
        centers = np.array([[0.05, 0.0, 0.0], [5.0, 5.0, 5.0]])  # second is empty
        new = kmeans_iterate(points, centers)
        # reseeded at the point farthest from its assigned center
        np.testing.assert_allclose(new[1], [0.9, 0, 0])

    def test_empty_input_rejected(self):
        with pytest.raises(PaletteError):
            kmeans_iterate(np.zeros((0, 3)), np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_extract_palette_invariants_property(k, seed):
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 1, (9, 9, 3)).astype(np.float32)
    palette = extract_palette(image, k, seed=seed)
    assert len(palette) == k
    assert palette.colors.min() >= 0.0
    assert palette.colors.max() <= 1.0
