"""The alpha predictor and residue predictor networks.

Both are the same fully convolutional encoder/decoder: three stride-2
convolutions doubling the channel count each time, three stride-2
transposed convolutions with skip concatenations at each scale (the last
skip re-attaches the raw input image), a fusing convolution, and a head
convolution with sigmoid (alpha) or tanh (residue) output. Each conv block
is conv -> ReLU -> batchnorm.

The alpha predictor consumes the image plus K single-color palette planes
(C = 3 + 3K) and emits K opacity maps; the residue predictor consumes the
image plus K (palette plane, alpha plane) blocks (C = 3 + 4K) and emits 3K
zero-centered color offsets.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import PaletteSizeMismatchError, ShapeError
from .palette import Palette
from .stacks import AlphaStack
from .tensor import Array, BatchNorm2d, Conv2d, Deconv2d, activation

DOWNSCALE = 8  # three stride-2 stages
ALPHA_SUM_PRECONDITION = 1e-3


class _ConvBlock:
    """conv -> ReLU -> BN, the repeating unit of both predictors."""

    def __init__(self, conv, channels_out: int):
        self.conv = conv
        self.act = activation("relu")
        self.bn = BatchNorm2d(channels_out)

    def forward(self, x: Array, train: bool, update_stats: bool) -> Array:
        return self.bn.forward(self.act.forward(self.conv.forward(x, train), train),
                               train, update_stats)

    def backward(self, gy: Array) -> Array:
        return self.conv.backward(self.act.backward(self.bn.backward(gy)))

    def params(self) -> dict[str, Array]:
        out = {f"conv.{k}": v for k, v in self.conv.params().items()}
        out.update({f"bn.{k}": v for k, v in self.bn.params().items()})
        return out

    def grads(self) -> dict[str, Array]:
        out = {f"conv.{k}": v for k, v in self.conv.grads.items()}
        out.update({f"bn.{k}": v for k, v in self.bn.grads.items()})
        return out

    def buffers(self) -> dict[str, Array]:
        return {f"bn.{k}": v for k, v in self.bn.buffers().items()}


class UNet:
    """Fully convolutional encoder/decoder with skip concatenations."""

    def __init__(self, in_channels: int, out_channels: int, head: str,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        c = in_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.head_kind = head
        self.enc1 = _ConvBlock(Conv2d(c, 2 * c, stride=2, rng=rng), 2 * c)
        self.enc2 = _ConvBlock(Conv2d(2 * c, 4 * c, stride=2, rng=rng), 4 * c)
        self.enc3 = _ConvBlock(Conv2d(4 * c, 8 * c, stride=2, rng=rng), 8 * c)
        self.dec1 = _ConvBlock(Deconv2d(8 * c, 4 * c, stride=2, rng=rng), 4 * c)
        self.dec2 = _ConvBlock(Deconv2d(8 * c, 2 * c, stride=2, rng=rng), 2 * c)
        self.dec3 = _ConvBlock(Deconv2d(4 * c, 2 * c, stride=2, rng=rng), 2 * c)
        self.fuse = _ConvBlock(Conv2d(2 * c + 3, c, stride=1, rng=rng), c)
        self.head = Conv2d(c, out_channels, stride=1, rng=rng)
        self.head_act = activation(head)
        self._blocks = {
            "enc1": self.enc1, "enc2": self.enc2, "enc3": self.enc3,
            "dec1": self.dec1, "dec2": self.dec2, "dec3": self.dec3,
            "fuse": self.fuse,
        }

    def forward(self, x: Array, train: bool = False, update_stats: bool = True) -> Array:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        if h % DOWNSCALE or w % DOWNSCALE:
            raise ShapeError(f"spatial dims must be divisible by {DOWNSCALE}, got {h}x{w}")
        image = x[:, :3]
        e1 = self.enc1.forward(x, train, update_stats)
        e2 = self.enc2.forward(e1, train, update_stats)
        e3 = self.enc3.forward(e2, train, update_stats)
        d1 = self.dec1.forward(e3, train, update_stats)
        d2 = self.dec2.forward(np.concatenate([d1, e2], axis=1), train, update_stats)
        d3 = self.dec3.forward(np.concatenate([d2, e1], axis=1), train, update_stats)
        f = self.fuse.forward(np.concatenate([d3, image], axis=1), train, update_stats)
        return self.head_act.forward(self.head.forward(f, train), train)

    def backward(self, gy: Array) -> Array:
        """Returns the gradient w.r.t. the full stem input (incl. image channels)."""
        gf = self.head.backward(self.head_act.backward(gy))
        gcat3 = self.fuse.backward(gf)
        gd3, gimage = gcat3[:, :-3], gcat3[:, -3:]
        gcat2 = self.dec3.backward(gd3)
        half2 = gcat2.shape[1] // 2
        gd2, ge1_skip = gcat2[:, :half2], gcat2[:, half2:]
        gcat1 = self.dec2.backward(gd2)
        half1 = gcat1.shape[1] // 2
        gd1, ge2_skip = gcat1[:, :half1], gcat1[:, half1:]
        ge3 = self.dec1.backward(gd1)
        ge2 = self.enc3.backward(ge3) + ge2_skip
        ge1 = self.enc2.backward(ge2) + ge1_skip
        gx = self.enc1.backward(ge1)
        gx[:, :3] += gimage
        return gx

    def params(self) -> dict[str, Array]:
        out = {}
        for name, block in self._blocks.items():
            out.update({f"{name}.{k}": v for k, v in block.params().items()})
        out.update({f"head.{k}": v for k, v in self.head.params().items()})
        return out

    def grads(self) -> dict[str, Array]:
        out = {}
        for name, block in self._blocks.items():
            out.update({f"{name}.{k}": v for k, v in block.grads().items()})
        out.update({f"head.{k}": v for k, v in self.head.grads.items()})
        return out

    def buffers(self) -> dict[str, Array]:
        out = {}
        for name, block in self._blocks.items():
            out.update({f"{name}.{k}": v for k, v in block.buffers().items()})
        return out

    def state(self) -> dict[str, Array]:
        out = self.params()
        out.update(self.buffers())
        return out


def alpha_predictor(k: int, rng: np.random.Generator | None = None) -> UNet:
    return UNet(3 + 3 * k, k, head="sigmoid", rng=rng)


def residue_predictor(k: int, rng: np.random.Generator | None = None) -> UNet:
    return UNet(3 + 4 * k, 3 * k, head="tanh", rng=rng)


class ModelBundle:
    """The trained pair of predictors for a fixed palette size K."""

    def __init__(self, k: int, rng: np.random.Generator | None = None,
                 alpha_net: UNet | None = None, residue_net: UNet | None = None):
        rng = rng or np.random.default_rng(0)
        self.k = k
        self.alpha_net = alpha_net or alpha_predictor(k, rng)
        self.residue_net = residue_net or residue_predictor(k, rng)

    def params(self) -> dict[str, Array]:
        out = {f"alpha.{n}": v for n, v in self.alpha_net.params().items()}
        out.update({f"residue.{n}": v for n, v in self.residue_net.params().items()})
        return out

    def grads(self) -> dict[str, Array]:
        out = {f"alpha.{n}": v for n, v in self.alpha_net.grads().items()}
        out.update({f"residue.{n}": v for n, v in self.residue_net.grads().items()})
        return out

    def state(self) -> dict[str, Array]:
        out = {f"alpha.{n}": v for n, v in self.alpha_net.state().items()}
        out.update({f"residue.{n}": v for n, v in self.residue_net.state().items()})
        return out


def _to_nchw(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {img.shape}")
    return np.ascontiguousarray(img.transpose(2, 0, 1))[None]


def palette_planes(palette: Palette, h: int, w: int) -> np.ndarray:
    """K single-color images stacked channelwise: (3K, H, W)."""
    k = len(palette)
    planes = np.broadcast_to(palette.colors.reshape(k * 3, 1, 1), (k * 3, h, w))
    return np.ascontiguousarray(planes.astype(np.float32))


def _pad_to_multiple(x: np.ndarray, m: int) -> tuple[np.ndarray, int, int]:
    h, w = x.shape[2], x.shape[3]
    ph = (-h) % m
    pw = (-w) % m
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return x, h, w


def predict_alpha(image: np.ndarray, palette: Palette, bundle: ModelBundle,
                  train: bool = False) -> AlphaStack:
    """Run the alpha predictor; returns K raw (unnormalized) opacity maps."""
    if len(palette) != bundle.k:
        raise PaletteSizeMismatchError(len(palette), bundle.k)
    x = _to_nchw(image)
    h, w = x.shape[2], x.shape[3]
    if h % DOWNSCALE or w % DOWNSCALE:
        warnings.warn(f"image {h}x{w} not divisible by {DOWNSCALE}; "
                      "reflect-padding and cropping the output")
    x, h, w = _pad_to_multiple(x, DOWNSCALE)
    planes = palette_planes(palette, x.shape[2], x.shape[3])
    inp = np.concatenate([x, planes[None]], axis=1)
    raw = bundle.alpha_net.forward(inp, train=train)
    return AlphaStack(raw[0, :, :h, :w], normalized=False)


def predict_residues(image: np.ndarray, palette: Palette, alphas: AlphaStack,
                     bundle: ModelBundle, train: bool = False) -> np.ndarray:
    """Run the residue predictor on normalized alphas; returns (K, H, W, 3)."""
    if len(palette) != bundle.k:
        raise PaletteSizeMismatchError(len(palette), bundle.k)
    if not alphas.normalized or alphas.sum_error() > ALPHA_SUM_PRECONDITION:
        raise ValueError("predict_residues requires normalized alphas "
                         f"(per-pixel sums within {ALPHA_SUM_PRECONDITION} of 1)")
    x = _to_nchw(image)
    h, w = x.shape[2], x.shape[3]
    a = alphas.values[None]
    x, h, w = _pad_to_multiple(x, DOWNSCALE)
    if a.shape[2] != x.shape[2] or a.shape[3] != x.shape[3]:
        a = np.pad(a, ((0, 0), (0, 0), (0, x.shape[2] - a.shape[2]),
                       (0, x.shape[3] - a.shape[3])), mode="reflect")
    inp = build_residue_input(x, palette, a)
    out = bundle.residue_net.forward(inp, train=train)
    k = bundle.k
    res = out[0, :, :h, :w].reshape(k, 3, h, w)
    return np.ascontiguousarray(res.transpose(0, 2, 3, 1))


def build_residue_input(x: np.ndarray, palette: Palette, alphas: np.ndarray) -> np.ndarray:
    """Assemble image + K (palette plane, alpha plane) blocks: (N, 3+4K, H, W)."""
    n, _, h, w = x.shape
    k = len(palette)
    parts = [x]
    planes = palette_planes(palette, h, w)
    for i in range(k):
        parts.append(np.broadcast_to(planes[3 * i:3 * (i + 1)][None], (n, 3, h, w)))
        parts.append(alphas[:, i:i + 1].astype(x.dtype, copy=False))
    return np.ascontiguousarray(np.concatenate(parts, axis=1))


def layer_colors(palette: Palette, residues: np.ndarray) -> np.ndarray:
    """Final per-layer colors: palette color plus residue, clamped to [0, 1]."""
    return np.clip(palette.colors[:, None, None, :] + residues, 0.0, 1.0).astype(np.float32)
