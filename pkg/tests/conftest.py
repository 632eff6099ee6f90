import numpy as np
import pytest
from PIL import Image as PILImage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=32, w=32, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, size=(h, w, 3)).astype(np.float32)


def random_palette(rng, k, lo=0.05, hi=0.95):
    from softseg.palette import Palette

    return Palette(rng.uniform(lo, hi, size=(k, 3)).astype(np.float32), source="manual")


def random_normalized_alphas(rng, k, h, w):
    """Dirichlet-style random stack that satisfies the unit-sum condition."""
    raw = rng.gamma(1.0, 1.0, size=(k, h, w)).astype(np.float64)
    return (raw / raw.sum(axis=0)).astype(np.float32)


def low_frequency_field(rng, h, w, cells=4):
    """Smooth random scalar field in [0, 1] from upsampled coarse noise."""
    coarse = rng.uniform(0, 1, size=(cells, cells))
    img = PILImage.fromarray((coarse * 255).astype(np.uint8), mode="L")
    smooth = np.asarray(img.resize((w, h), PILImage.BICUBIC), dtype=np.float32) / 255.0
    return smooth


def synthetic_layered_image(rng, h=64, w=64, n_colors=4):
    """Piecewise-smooth blend of a few flat colors; easy to decompose."""
    colors = rng.uniform(0.05, 0.95, size=(n_colors, 3))
    fields = np.stack([low_frequency_field(rng, h, w) for _ in range(n_colors)])
    fields = np.exp(4.0 * fields)
    weights = fields / fields.sum(axis=0)
    image = np.einsum("khw,kc->hwc", weights, colors)
    return np.clip(image, 0, 1).astype(np.float32)


def write_synthetic_dataset(directory, n_images=100, size=64, seed=0):
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_images):
        img = synthetic_layered_image(rng, size, size)
        PILImage.fromarray(np.floor(img * 255 + 0.5).astype(np.uint8)).save(
            directory / f"img_{i:04d}.png")
    return directory
