import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_image, random_normalized_alphas, random_palette
from softseg.errors import ShapeError
from softseg.metrics import (color_variance, evaluate, psnr, reconstruction_mse,
                             sparsity_score, ssim)
from softseg.stacks import AlphaStack, LayerStack


class TestReconstructionMse:
    def test_identical_zero(self, rng):
        img = random_image(rng)
        assert reconstruction_mse(img, img) == 0.0

    def test_uniform_offset(self, rng):
        img = random_image(rng, lo=0.1, hi=0.8)
        assert reconstruction_mse(img, img + 0.1) == pytest.approx(0.01, rel=1e-5)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            reconstruction_mse(random_image(rng, 8, 8), random_image(rng, 8, 9))


class TestPsnr:
    def test_known_value(self, rng):
        img = random_image(rng, lo=0.2, hi=0.8)
        assert psnr(img, img + 0.1) == pytest.approx(20.0, abs=1e-3)

    def test_identical_capped(self, rng):
        img = random_image(rng)
        assert psnr(img, img) == 100.0

    def test_consistent_with_mse(self, rng):
        a, b = random_image(rng), random_image(rng)
        mse = reconstruction_mse(a, b)
        assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), rel=1e-9)


class TestSsim:
    def test_self_similarity_is_one(self, rng):
        img = random_image(rng, 24, 24)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_anticorrelated_negative(self):
        x = np.indices((24, 24)).sum(axis=0) % 2
        img = np.repeat(x[..., None], 3, axis=2).astype(np.float32)
        assert ssim(img, 1.0 - img) < 0.0

    def test_window_size_guard(self, rng):
        small = random_image(rng, 8, 8)
        with pytest.raises(ShapeError):
            ssim(small, small)


class TestSparsity:
    def test_one_hot_zero(self):
        a = np.zeros((4, 5, 5), np.float32)
        a[2] = 1.0
        assert sparsity_score(AlphaStack(a, normalized=True)) == pytest.approx(0.0, abs=1e-7)

    def test_uniform_is_k_minus_one(self):
        k = 7
        a = np.full((k, 6, 6), 1 / k, np.float32)
        assert sparsity_score(AlphaStack(a, normalized=True)) == pytest.approx(6.0, abs=1e-4)

    def test_requires_normalized_flag(self, rng):
        with pytest.raises(ValueError):
            sparsity_score(AlphaStack(rng.uniform(0, 1, (3, 4, 4)).astype(np.float32)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 10_000))
    def test_bounds_property(self, k, seed):
        rng = np.random.default_rng(seed)
        a = AlphaStack(random_normalized_alphas(rng, k, 5, 5), normalized=True)
        score = sparsity_score(a)
        assert -1e-6 <= score <= (k - 1) + 1e-5


class TestColorVariance:
    def test_zero_residues(self, rng):
        palette = random_palette(rng, 3)
        colors = np.broadcast_to(palette.colors[:, None, None, :], (3, 6, 6, 3)).copy()
        alphas = random_normalized_alphas(rng, 3, 6, 6)
        stack = LayerStack(colors=colors, alphas=alphas, palette=palette)
        assert color_variance(stack) == pytest.approx(0.0, abs=1e-9)

    def test_bernoulli_half(self, rng):
        palette = random_palette(rng, 2)
        colors = np.zeros((2, 2, 2, 3), np.float32)
        colors[0, :, 0, 0] = 0.0
        colors[0, :, 1, 0] = 1.0
        alphas = np.full((2, 2, 2), 0.5, np.float32)
        stack = LayerStack(colors=colors, alphas=alphas, palette=palette)
        # layer 0 contributes var 0.25 in one channel; layer 1 contributes 0
        assert color_variance(stack) == pytest.approx(0.25 / 2, rel=1e-6)

    def test_invisible_layer_contributes_zero(self, rng):
        palette = random_palette(rng, 2)
        colors = rng.uniform(0, 1, (2, 4, 4, 3)).astype(np.float32)
        alphas = np.zeros((2, 4, 4), np.float32)
        alphas[0] = 1.0  # layer 1 never exceeds the support threshold
        stack = LayerStack(colors=colors, alphas=alphas, palette=palette)
        expected = colors[0].reshape(-1, 3).astype(np.float64).var(axis=0).sum() / 2
        assert color_variance(stack) == pytest.approx(expected, rel=1e-6)


class TestPermutationInvariance:
    def test_metrics_invariant_under_layer_permutation(self, rng):
        k = 4
        palette = random_palette(rng, k)
        alphas = random_normalized_alphas(rng, k, 16, 16)
        colors = rng.uniform(0, 1, (k, 16, 16, 3)).astype(np.float32)
        stack = LayerStack(colors=colors, alphas=alphas, palette=palette)
        perm = rng.permutation(k)
        permuted = LayerStack(colors=colors[perm], alphas=alphas[perm],
                              palette=type(palette)(palette.colors[perm]))
        image = random_image(rng, 16, 16)
        a = evaluate(image, stack)
        b = evaluate(image, permuted)
        assert a.sparsity == pytest.approx(b.sparsity, rel=1e-9)
        assert a.color_variance == pytest.approx(b.color_variance, rel=1e-9)
        assert a.reconstruction_mse == pytest.approx(b.reconstruction_mse, rel=1e-6)
        assert a.ssim == pytest.approx(b.ssim, rel=1e-6)
