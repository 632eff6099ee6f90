"""File formats: images, palette files, layer exports, weight containers.

The weight container is a single binary file: magic ``SSEG``, a format
version, K, the channel widths of both networks, then named parameter
blobs (name, shape, little-endian float32 data). Checkpoints reuse the
container with extra ``opt.*`` blobs for the optimizer state.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import ImageReadError, PaletteError, WeightsFormatError
from .models import ModelBundle
from .palette import Palette
from .stacks import LayerStack
from .tensor import AdamState

MAGIC = b"SSEG"
FORMAT_VERSION = 1


def load_image(path) -> np.ndarray:
    """Decode a PNG/JPEG into an (H, W, 3) float array in [0, 1].

    Grayscale images are replicated to three channels; an alpha channel in
    the input is dropped with a warning.
    """
    path = Path(path)
    try:
        with PILImage.open(path) as img:
            if img.mode in ("RGBA", "LA", "PA"):
                warnings.warn(f"{path.name}: ignoring alpha channel in input image")
            converted = img.convert("RGB")
            data = np.asarray(converted, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc
    return data


def quantize_8bit(values: np.ndarray) -> np.ndarray:
    """[0,1] floats to bytes, rounding half away from zero."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    PILImage.fromarray(quantize_8bit(image), mode="RGB").save(path)


def save_layers(stack: LayerStack, directory, options: dict | None = None,
                weights_hash: str | None = None) -> Path:
    """Write layer_00.png .. layer_{K-1}.png plus manifest.json; returns the
    manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgba = quantize_8bit(stack.rgba())
    for i in range(stack.k):
        PILImage.fromarray(rgba[i], mode="RGBA").save(directory / f"layer_{i:02d}.png")
    manifest = {
        "palette": stack.palette.to_lists(),
        "k": stack.k,
        "image_size": [stack.height, stack.width],
        "options": options or {},
        "weights_hash": weights_hash,
    }
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def load_layers(directory) -> LayerStack:
    """Read a save_layers export back into a LayerStack."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ImageReadError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    k = manifest["k"]
    colors, alphas = [], []
    for i in range(k):
        layer_path = directory / f"layer_{i:02d}.png"
        try:
            with PILImage.open(layer_path) as img:
                rgba = np.asarray(img.convert("RGBA"), dtype=np.float32) / 255.0
        except (UnidentifiedImageError, OSError) as exc:
            raise ImageReadError(f"cannot read layer {layer_path}: {exc}") from exc
        colors.append(rgba[..., :3])
        alphas.append(rgba[..., 3])
    palette = Palette(np.array(manifest["palette"], dtype=np.float32),
                      source="manual")
    return LayerStack(colors=np.stack(colors), alphas=np.stack(alphas), palette=palette)


def parse_palette(text: str) -> Palette:
    """Parse a palette from hex lines, 'r,g,b' lines, or the JSON form."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
            colors = np.array(data["colors"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise PaletteError(f"malformed palette JSON: {exc}") from exc
        return Palette(colors.astype(np.float32), source="manual")
    colors = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if len(line) != 7:
                raise PaletteError(f"line {lineno}: hex color must be #RRGGBB, got {line!r}")
            try:
                rgb = [int(line[j:j + 2], 16) / 255.0 for j in (1, 3, 5)]
            except ValueError:
                raise PaletteError(f"line {lineno}: invalid hex color {line!r}") from None
        else:
            parts = line.split(",")
            if len(parts) != 3:
                raise PaletteError(f"line {lineno}: expected 'r,g,b', got {line!r}")
            try:
                rgb = [float(p) for p in parts]
            except ValueError:
                raise PaletteError(f"line {lineno}: non-numeric component in {line!r}") from None
            if any(not 0.0 <= v <= 1.0 for v in rgb):
                raise PaletteError(f"line {lineno}: components must lie in [0, 1]")
        colors.append(rgb)
    if not colors:
        raise PaletteError("palette file contains no colors")
    return Palette(np.array(colors, dtype=np.float32), source="manual")


def format_palette(palette: Palette) -> str:
    return "\n".join(",".join(repr(float(v)) for v in row) for row in palette.colors) + "\n"


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    return head + data.tobytes()


def _serialize(k: int, widths: list[int], blobs: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<III", FORMAT_VERSION, k, len(widths)),
           struct.pack(f"<{len(widths)}I", *widths),
           struct.pack("<I", len(blobs))]
    for name in sorted(blobs):
        out.append(_pack_blob(name, blobs[name]))
    return b"".join(out)


def _deserialize(data: bytes) -> tuple[int, list[int], dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise WeightsFormatError("not a weight container (bad magic)")
    off = 4
    version, k, n_widths = struct.unpack_from("<III", data, off)
    off += 12
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported container version {version}")
    widths = list(struct.unpack_from(f"<{n_widths}I", data, off))
    off += 4 * n_widths
    (n_blobs,) = struct.unpack_from("<I", data, off)
    off += 4
    blobs = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        blobs[name] = arr.copy()
    if off != len(data):
        raise WeightsFormatError("trailing bytes in weight container")
    return k, widths, blobs


def _bundle_widths(bundle: ModelBundle) -> list[int]:
    return [bundle.alpha_net.in_channels, bundle.alpha_net.out_channels,
            bundle.residue_net.in_channels, bundle.residue_net.out_channels]


def save_weights(path, bundle: ModelBundle, optimizer: AdamState | None = None) -> str:
    """Write the weight container; returns its content hash."""
    blobs = dict(bundle.state())
    if optimizer is not None:
        for name, m in optimizer.m.items():
            blobs[f"opt.m.{name}"] = m
        for name, v in optimizer.v.items():
            blobs[f"opt.v.{name}"] = v
        blobs["opt.step_count"] = np.array([optimizer.step_count], dtype=np.float32)
    data = _serialize(bundle.k, _bundle_widths(bundle), blobs)
    Path(path).write_bytes(data)
    return hash_bytes(data)


def load_weights(path) -> tuple[ModelBundle, AdamState | None, str]:
    """Read a container, validating K and every blob shape against the
    architecture; returns (bundle, optimizer state or None, content hash)."""
    data = Path(path).read_bytes()
    k, widths, blobs = _deserialize(data)
    bundle = ModelBundle(k)
    if widths != _bundle_widths(bundle):
        raise WeightsFormatError(f"channel widths {widths} inconsistent with K={k}")
    state = bundle.state()
    for name, target in state.items():
        if name not in blobs:
            raise WeightsFormatError(f"missing parameter '{name}'")
        if blobs[name].shape != target.shape:
            raise WeightsFormatError(f"parameter '{name}' has shape {blobs[name].shape}, "
                                     f"expected {target.shape}")
        target[...] = blobs[name]
    optimizer = None
    opt_names = [n for n in blobs if n.startswith("opt.")]
    if opt_names:
        optimizer = AdamState()
        optimizer.step_count = int(blobs["opt.step_count"][0])
        for name in opt_names:
            if name.startswith("opt.m."):
                optimizer.m[name[6:]] = blobs[name].copy()
            elif name.startswith("opt.v."):
                optimizer.v[name[6:]] = blobs[name].copy()
    return bundle, optimizer, hash_bytes(data)


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def weights_hash(path) -> str:
    return hash_bytes(Path(path).read_bytes())
