"""softseg: soft color segmentation into palette-anchored RGBA layers.

Decomposes an RGB image into K RGBA layers of homogeneous color, either
with a trained feed-forward predictor pair or with a per-pixel energy
minimization baseline, and provides the layer editing operations
(recoloring, masking, merging, compositing) that make the layers useful.
"""

from .layer_ops import compose, decompose, guided_filter, merge_duplicate_layers, \
    normalize_alpha, recolor
from .metrics import EvalReport, evaluate
from .models import ModelBundle, predict_alpha, predict_residues
from .palette import Palette, extract_palette
from .stacks import AlphaStack, LayerStack
from .storage import load_image, load_layers, load_weights, parse_palette, \
    save_layers, save_weights
from .trainer import TrainConfig, train
from .unmixer import ColorModel, UnmixConfig, unmix_image, unmix_pixel

__version__ = "0.1.0"

__all__ = [
    "AlphaStack", "ColorModel", "EvalReport", "LayerStack", "ModelBundle",
    "Palette", "TrainConfig", "UnmixConfig", "compose", "decompose",
    "evaluate", "extract_palette", "guided_filter", "load_image",
    "load_layers", "load_weights", "merge_duplicate_layers", "normalize_alpha",
    "parse_palette", "predict_alpha", "predict_residues", "recolor",
    "save_layers", "save_weights", "train", "unmix_image", "unmix_pixel",
]
