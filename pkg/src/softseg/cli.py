"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure (structured
message on stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import layer_ops, metrics, storage, unmixer
from .benchmark import run_benchmark, format_report
from .errors import SoftsegError
from .palette import extract_palette
from .trainer import TrainConfig, train

ENV_WEIGHTS = "SOFTSEG_WEIGHTS"
ENV_PORT = "SOFTSEG_PORT"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_color(text: str) -> np.ndarray:
    text = text.strip()
    if text.startswith("#"):
        if len(text) != 7:
            raise SoftsegError(f"color must be #RRGGBB, got {text!r}")
        return np.array([int(text[i:i + 2], 16) / 255.0 for i in (1, 3, 5)],
                        dtype=np.float32)
    parts = text.split(",")
    if len(parts) != 3:
        raise SoftsegError(f"color must be #RRGGBB or r,g,b, got {text!r}")
    return np.array([float(p) for p in parts], dtype=np.float32)


def _weights_arg(args) -> str:
    path = args.weights or os.environ.get(ENV_WEIGHTS)
    if not path:
        raise SoftsegError(f"no weights given (use --weights or {ENV_WEIGHTS})")
    return path


def _load_palette_file(path) -> "storage.Palette":
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SoftsegError(f"cannot read palette file {path}: {exc}") from exc
    return storage.parse_palette(text)


def _mask_specs(args) -> list[tuple[int, np.ndarray, str]]:
    specs = []
    for item in args.mask or ():
        if ":" not in item:
            raise SoftsegError(f"--mask expects LAYER:FILE, got {item!r}")
        idx_s, path = item.split(":", 1)
        mask_img = storage.load_image(path)
        specs.append((int(idx_s), mask_img.mean(axis=2), "multiply"))
    return specs


def build_parser() -> _Parser:
    parser = _Parser(prog="softseg",
                     description="Soft color segmentation: decompose images "
                                 "into palette-anchored RGBA layers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("palette", help="extract a palette by K-means")
    p.add_argument("image")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="palette file (default: stdout)")
    p.add_argument("--format", choices=("floats", "hex", "json"), default="floats")

    p = sub.add_parser("decompose", help="decompose an image into RGBA layers")
    p.add_argument("image")
    p.add_argument("--palette", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--guided-filter", action="store_true")
    p.add_argument("--gf-radius", type=int, default=layer_ops.GUIDED_FILTER_RADIUS)
    p.add_argument("--gf-eps", type=float, default=layer_ops.GUIDED_FILTER_EPS)
    p.add_argument("--mask", action="append", metavar="LAYER:FILE")
    p.add_argument("--out", required=True)

    p = sub.add_parser("unmix", help="optimization-based per-pixel decomposition")
    p.add_argument("image")
    p.add_argument("--palette", required=True)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=300)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the predictors")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="metrics for a decomposition")
    p.add_argument("original")
    p.add_argument("layers_dir")

    p = sub.add_parser("recolor", help="recolor one layer and recomposite")
    p.add_argument("layers_dir")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--color", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("frames", help="decompose a frame directory with a fixed palette")
    p.add_argument("frames_dir")
    p.add_argument("--palette", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="forward-pass speed scaling report")
    p.add_argument("--sizes", default="256,512,1024")
    p.add_argument("--weights", default=None)
    p.add_argument("--k", type=int, default=7, help="palette size when no weights given")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--compare-backends", action="store_true")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--weights", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--ui", default=None, help="static frontend directory to serve at /")
    return parser


def _cmd_palette(args) -> int:
    image = storage.load_image(args.image)
    palette = extract_palette(image, args.k, seed=args.seed)
    if args.format == "json":
        text = json.dumps({"colors": palette.to_lists()}, indent=2) + "\n"
    elif args.format == "hex":
        text = "\n".join("#%02x%02x%02x" % tuple(storage.quantize_8bit(c))
                         for c in palette.colors) + "\n"
    else:
        text = storage.format_palette(palette)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_decompose(args) -> int:
    image = storage.load_image(args.image)
    palette = _load_palette_file(args.palette)
    weights_path = _weights_arg(args)
    bundle, _, whash = storage.load_weights(weights_path)
    stack = layer_ops.decompose(image, palette, bundle,
                                use_guided_filter=args.guided_filter,
                                gf_radius=args.gf_radius, gf_eps=args.gf_eps,
                                masks=_mask_specs(args))
    options = {"guided_filter": args.guided_filter,
               "gf_radius": args.gf_radius, "gf_eps": args.gf_eps,
               "masks": [m.split(":", 1)[0] for m in args.mask or ()]}
    manifest = storage.save_layers(stack, args.out, options=options, weights_hash=whash)
    print(manifest)
    return 0


def _cmd_unmix(args) -> int:
    image = storage.load_image(args.image)
    palette = _load_palette_file(args.palette)
    cfg = unmixer.UnmixConfig(sparsity_weight=args.sigma, max_iters=args.max_iters)
    result = unmixer.unmix_image(image, unmixer.models_from_palette(palette), cfg,
                                 palette=palette)
    storage.save_layers(result.layers, args.out,
                        options={"method": "unmix", "sigma": args.sigma})
    s = result.summary
    print(f"unmixed {s.pixels} pixels, {s.non_converged} not converged "
          f"({100 * s.converged_fraction:.2f}% converged, {s.iterations} iterations)")
    return 0


def _cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config)
    result = train(config, progress=_train_progress)
    print(f"weights: {result.weights_path}")
    print(f"log: {result.log_path}")
    return 0


def _train_progress(row):
    if row["step"] % 100 == 0:
        print(f"step {row['step']}: total={row['loss_total']:.4f} "
              f"r={row['loss_r']:.4f} a={row['loss_a']:.4f} d={row['loss_d']:.4f}",
              file=sys.stderr)


def _cmd_eval(args) -> int:
    image = storage.load_image(args.original)
    stack = storage.load_layers(args.layers_dir)
    report = metrics.evaluate(image, stack)
    print(json.dumps(report.to_dict(), indent=2))
    table = ["metric              value",
             f"reconstruction_mse  {report.reconstruction_mse:.6f}",
             f"psnr                {report.psnr:.2f} dB",
             f"ssim                {report.ssim:.4f}",
             f"sparsity            {report.sparsity:.4f}",
             f"color_variance      {report.color_variance:.6f}"]
    print("\n".join(table), file=sys.stderr)
    return 0


def _cmd_recolor(args) -> int:
    stack = storage.load_layers(args.layers_dir)
    composite = layer_ops.recolor(stack, args.layer, _parse_color(args.color))
    storage.save_image(args.out, composite)
    return 0


def _cmd_frames(args) -> int:
    frames_dir = Path(args.frames_dir)
    palette = _load_palette_file(args.palette)
    bundle, _, whash = storage.load_weights(_weights_arg(args))
    frames = sorted(p for p in frames_dir.iterdir()
                    if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not frames:
        raise SoftsegError(f"no frames in {frames_dir}")
    out_root = Path(args.out)
    for frame in frames:
        image = storage.load_image(frame)
        stack = layer_ops.decompose(image, palette, bundle)
        storage.save_layers(stack, out_root / frame.stem,
                            options={"frame": frame.name}, weights_hash=whash)
    print(f"decomposed {len(frames)} frames into {out_root}")
    return 0


def _cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    weights = args.weights or os.environ.get(ENV_WEIGHTS)
    report = run_benchmark(sizes=sizes, weights_path=weights, k=args.k,
                           repeats=args.repeats,
                           compare_backends=args.compare_backends)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(format_report(report))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    port = args.port or int(os.environ.get(ENV_PORT, "8823"))
    bundle, _, whash = storage.load_weights(_weights_arg(args))
    app = create_app(bundle, weights_hash=whash, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


_COMMANDS = {
    "palette": _cmd_palette,
    "decompose": _cmd_decompose,
    "unmix": _cmd_unmix,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "recolor": _cmd_recolor,
    "frames": _cmd_frames,
    "bench": _cmd_bench,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"softseg: usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except SoftsegError as exc:
        print(f"softseg: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"softseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
