"""JSON-over-HTTP service backing the interactive UI.

Weights are loaded once and never mutated; every request works on its own
arrays, so concurrent requests are independent. Recent decompositions are
kept in a tiny LRU keyed by content hash so recoloring and metrics can
reference them without re-uploading layers.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
from collections import OrderedDict
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image as PILImage, UnidentifiedImageError
from pydantic import BaseModel, Field

from . import layer_ops, metrics
from .errors import PaletteSizeMismatchError, SoftsegError
from .models import ModelBundle
from .palette import MAX_COLORS, Palette, extract_palette
from .stacks import LayerStack
from .storage import quantize_8bit

DEFAULT_PIXEL_BUDGET = 2 ** 22
LRU_SIZE = 8


class PaletteRequest(BaseModel):
    image: str
    k: int = Field(ge=1, le=MAX_COLORS)
    seed: int = 0


class DecomposeOptions(BaseModel):
    guided_filter: bool = False
    gf_radius: int = layer_ops.GUIDED_FILTER_RADIUS
    gf_eps: float = layer_ops.GUIDED_FILTER_EPS


class DecomposeRequest(BaseModel):
    image: str
    palette: list[list[float]]
    options: DecomposeOptions = DecomposeOptions()


class RecolorRequest(BaseModel):
    layers_ref: str | None = None
    layers: list[str] | None = None
    palette: list[list[float]] | None = None
    layer_index: int
    color: list[float] | str


class MetricsRequest(BaseModel):
    original: str
    layers_ref: str | None = None
    layers: list[str] | None = None
    palette: list[list[float]] | None = None


class _BadRequest(Exception):
    def __init__(self, message: str, field: str | None = None):
        self.message = message
        self.field = field
        super().__init__(message)


def _decode_image_b64(data: str, field: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
        with PILImage.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (ValueError, UnidentifiedImageError, OSError) as exc:
        raise _BadRequest(f"not a decodable base64 PNG/JPEG: {exc}", field=field) from exc


def _decode_rgba_b64(data: str, field: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
        with PILImage.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert("RGBA"), dtype=np.float32) / 255.0
    except (ValueError, UnidentifiedImageError, OSError) as exc:
        raise _BadRequest(f"not a decodable base64 RGBA PNG: {exc}", field=field) from exc


def _encode_png(array: np.ndarray, mode: str) -> str:
    img = PILImage.fromarray(quantize_8bit(array), mode=mode)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _parse_palette_field(colors: list[list[float]], field: str) -> Palette:
    try:
        return Palette(np.array(colors, dtype=np.float32), source="manual")
    except (SoftsegError, ValueError) as exc:
        raise _BadRequest(str(exc), field=field) from exc


def _parse_color_field(color, field: str) -> np.ndarray:
    if isinstance(color, str):
        text = color.strip()
        if not (text.startswith("#") and len(text) == 7):
            raise _BadRequest(f"color string must be #RRGGBB, got {text!r}", field=field)
        try:
            return np.array([int(text[i:i + 2], 16) / 255.0 for i in (1, 3, 5)],
                            dtype=np.float32)
        except ValueError:
            raise _BadRequest(f"invalid hex color {text!r}", field=field) from None
    arr = np.asarray(color, dtype=np.float32)
    if arr.shape != (3,) or arr.min() < 0 or arr.max() > 1:
        raise _BadRequest("color must be three floats in [0, 1]", field=field)
    return arr


class _StackCache:
    def __init__(self, size: int = LRU_SIZE):
        self._entries: OrderedDict[str, LayerStack] = OrderedDict()
        self._lock = threading.Lock()
        self._size = size

    def put(self, key: str, stack: LayerStack) -> None:
        with self._lock:
            self._entries[key] = stack
            self._entries.move_to_end(key)
            while len(self._entries) > self._size:
                self._entries.popitem(last=False)

    def get(self, key: str) -> LayerStack | None:
        with self._lock:
            stack = self._entries.get(key)
            if stack is not None:
                self._entries.move_to_end(key)
            return stack


def create_app(bundle: ModelBundle, weights_hash: str,
               pixel_budget: int = DEFAULT_PIXEL_BUDGET,
               ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="softseg service")
    cache = _StackCache()

    @app.exception_handler(RequestValidationError)
    async def _validation_handler(request: Request, exc: RequestValidationError):
        details = [{"field": ".".join(str(p) for p in err["loc"] if p != "body"),
                    "message": err["msg"]} for err in exc.errors()]
        return JSONResponse(status_code=400,
                            content={"error": "malformed request body",
                                     "details": details})

    @app.exception_handler(_BadRequest)
    async def _bad_request_handler(request: Request, exc: _BadRequest):
        return JSONResponse(status_code=400,
                            content={"error": exc.message, "field": exc.field})

    @app.exception_handler(SoftsegError)
    async def _softseg_handler(request: Request, exc: SoftsegError):
        return JSONResponse(status_code=500, content={"error": str(exc)})

    class _PayloadTooLarge(Exception):
        def __init__(self, pixels: int):
            self.pixels = pixels

    def _check_budget(image: np.ndarray) -> None:
        pixels = image.shape[0] * image.shape[1]
        if pixels > pixel_budget:
            raise _PayloadTooLarge(pixels)

    @app.exception_handler(_PayloadTooLarge)
    async def _too_large_handler(request: Request, exc: _PayloadTooLarge):
        return JSONResponse(status_code=413,
                            content={"error": f"image has {exc.pixels} pixels, "
                                              f"budget is {pixel_budget}"})

    @app.exception_handler(PaletteSizeMismatchError)
    async def _mismatch_handler(request: Request, exc: PaletteSizeMismatchError):
        return JSONResponse(status_code=422,
                            content={"error": str(exc), "expected_k": exc.expected,
                                     "got_k": exc.got})

    @app.get("/api/health")
    async def health():
        return {"status": "ok", "k": bundle.k, "weights_hash": weights_hash}

    @app.post("/api/palette")
    async def palette_endpoint(req: PaletteRequest):
        image = _decode_image_b64(req.image, "image")
        _check_budget(image)
        palette = extract_palette(image, req.k, seed=req.seed)
        return {"colors": palette.to_lists()}

    def _decompose(image: np.ndarray, palette: Palette, options: DecomposeOptions) -> dict:
        _check_budget(image)
        if len(palette) != bundle.k:
            raise PaletteSizeMismatchError(len(palette), bundle.k)
        stack = layer_ops.decompose(image, palette, bundle,
                                    use_guided_filter=options.guided_filter,
                                    gf_radius=options.gf_radius,
                                    gf_eps=options.gf_eps)
        ref = hashlib.sha256(
            image.tobytes() + palette.colors.tobytes()
            + json.dumps(options.model_dump(), sort_keys=True).encode()
            + weights_hash.encode()).hexdigest()[:16]
        cache.put(ref, stack)
        rgba = stack.rgba()
        manifest = {
            "palette": stack.palette.to_lists(),
            "k": stack.k,
            "image_size": [stack.height, stack.width],
            "options": options.model_dump(),
            "weights_hash": weights_hash,
        }
        return {"layers": [_encode_png(rgba[i], "RGBA") for i in range(stack.k)],
                "manifest": manifest,
                "layers_ref": ref}

    @app.post("/api/decompose")
    async def decompose_endpoint(req: DecomposeRequest):
        image = _decode_image_b64(req.image, "image")
        palette = _parse_palette_field(req.palette, "palette")
        return _decompose(image, palette, req.options)

    def _resolve_stack(layers_ref, layers, palette_colors, field: str) -> LayerStack:
        if layers_ref:
            stack = cache.get(layers_ref)
            if stack is None:
                raise _BadRequest(f"unknown layers_ref {layers_ref!r} "
                                  "(cache may have expired)", field="layers_ref")
            return stack
        if not layers:
            raise _BadRequest("either layers_ref or layers must be given", field=field)
        if not palette_colors:
            raise _BadRequest("inline layers need the palette used to produce them",
                              field="palette")
        rgba = np.stack([_decode_rgba_b64(b, f"{field}[{i}]")
                         for i, b in enumerate(layers)])
        palette = _parse_palette_field(palette_colors, "palette")
        if len(palette) != rgba.shape[0]:
            raise _BadRequest(f"palette size {len(palette)} != layer count "
                              f"{rgba.shape[0]}", field="palette")
        return LayerStack(colors=rgba[..., :3], alphas=rgba[..., 3], palette=palette)

    @app.post("/api/recolor")
    async def recolor_endpoint(req: RecolorRequest):
        stack = _resolve_stack(req.layers_ref, req.layers, req.palette, "layers")
        color = _parse_color_field(req.color, "color")
        if not 0 <= req.layer_index < stack.k:
            raise _BadRequest(f"layer_index {req.layer_index} out of range "
                              f"for {stack.k} layers", field="layer_index")
        composite = layer_ops.recolor(stack, req.layer_index, color)
        return {"composite": _encode_png(composite, "RGB")}

    @app.post("/api/metrics")
    async def metrics_endpoint(req: MetricsRequest):
        original = _decode_image_b64(req.original, "original")
        stack = _resolve_stack(req.layers_ref, req.layers, req.palette, "layers")
        if (original.shape[0], original.shape[1]) != (stack.height, stack.width):
            raise _BadRequest("original size does not match the layers", field="original")
        report = metrics.evaluate(original, stack)
        return report.to_dict()

    try:
        import multipart  # noqa: F401  (python-multipart, optional)

        from fastapi import File, Form, UploadFile

        @app.post("/api/decompose-upload")
        async def decompose_upload(image: UploadFile = File(...),
                                   palette: str = Form(...),
                                   options: str = Form("{}")):
            raw = await image.read()
            try:
                with PILImage.open(io.BytesIO(raw)) as img:
                    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                raise _BadRequest(f"not a decodable image upload: {exc}",
                                  field="image") from exc
            try:
                pal = _parse_palette_field(json.loads(palette), "palette")
                opts = DecomposeOptions(**json.loads(options))
            except (json.JSONDecodeError, TypeError) as exc:
                raise _BadRequest(f"malformed form field: {exc}", field="palette") from exc
            return _decompose(arr, pal, opts)
    except ImportError:
        pass

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=Path(ui_dir), html=True), name="ui")
    return app
