"""Command-line interface: train / encode / decode / eval / report.

Exit codes: 0 success, 1 usage error, 2 data or model error. Every
subcommand accepts ``--config FILE`` with ``key=value`` lines naming long
options; command-line flags override the file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import bitstream, checkpoint, evalkit
from .config import LATENT_MODES, PADDING_MODES, PREDICTORS, preset
from .entropy import DecodeError
from .pipeline import CompassModel, decode, encode
from .training import STAGES, TrainConfig, train_stage

log = logging.getLogger("compass")

MODEL_DIR_ENV = "COMPASS_MODEL_DIR"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_scales(text: str) -> list[float]:
    try:
        scales = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scales list {text!r}") from None
    prev = 1.0
    for s in scales:
        if s <= prev:
            raise argparse.ArgumentTypeError("scales must be strictly increasing and > 1")
        prev = s
    return scales


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from None
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _common(p):
    p.add_argument("--config", help="key=value file mirroring the long options")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _ablation(p):
    p.add_argument("--predictor", choices=PREDICTORS, default=None, help="inter-layer predictor")
    p.add_argument("--padding", choices=PADDING_MODES, default=None, help="encoder padding scheme")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="compass", description="Arbitrary-scale spatially scalable learned image codec")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="run one training stage")
    _common(t)
    _ablation(t)
    t.add_argument("--data", required=True, help="folder of PNG/PPM training images")
    t.add_argument("--out", required=True, help="output checkpoint")
    t.add_argument("--init", help="checkpoint to start from (required for EL stages)")
    t.add_argument("--preset", default="desk", choices=("paper", "desk", "tiny"))
    t.add_argument("--stage", choices=STAGES, default="joint")
    t.add_argument("--latent", choices=LATENT_MODES, default="rounded")
    t.add_argument("--lmbda", type=float, default=0.01)
    t.add_argument("--K", type=int, default=1)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--crop", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--scale-min", type=float, default=1.2)
    t.add_argument("--scale-max", type=float, default=2.0)
    t.add_argument("--resume", action="store_true", help="continue optimizer state and step from --init")
    t.add_argument("--log", help="CSV training log")

    e = sub.add_parser("encode", help="encode an image into a .cmps stream")
    _common(e)
    _ablation(e)
    e.add_argument("--model", help="checkpoint (default: registry entry for --quality)")
    e.add_argument("--input", required=True, help="input image, used as the largest layer")
    e.add_argument("--scales", required=True, type=parse_scales, help="EL factors vs. the BL, e.g. 2.0,3.2")
    e.add_argument("--out", required=True)
    e.add_argument("--quality", type=int, default=0, help="model index recorded in the stream")

    d = sub.add_parser("decode", help="decode layers from a .cmps stream")
    _common(d)
    _ablation(d)
    d.add_argument("--model", help="checkpoint (default: registry entry named in the stream)")
    d.add_argument("--input", required=True)
    d.add_argument("--layer", type=int, default=None, help="layer to output (default: last)")
    d.add_argument("--out", required=True, help="output image (.png or .ppm)")

    v = sub.add_parser("eval", help="rate/distortion report over an image folder")
    _common(v)
    _ablation(v)
    v.add_argument("--data", required=True)
    v.add_argument("--models", help="registry directory (q<index>.ckpt files) or comma-separated checkpoints")
    v.add_argument("--scales", required=True, type=parse_scales)
    v.add_argument("--out", required=True, help="per-image report CSV")
    v.add_argument("--anchor", help="report CSV of the anchor run; writes a BD-rate comparison")
    v.add_argument("--bd-out", help="BD-rate CSV path (default: <out>.bd.csv)")
    v.add_argument("--plot", help="rate-PSNR plot (PNG)")

    r = sub.add_parser("report", help="BD-rate and curves from report CSVs")
    _common(r)
    r.add_argument("--anchor", required=True)
    r.add_argument("--test", required=True, nargs="+")
    r.add_argument("--out", required=True, help="BD-rate CSV")
    r.add_argument("--plot", help="rate-PSNR plot (PNG)")
    return parser


def _config_path(argv) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv):
    parser = build_parser()
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    path = _config_path(argv)
    if path is not None and command in subparsers:
        values = read_config_file(path)
        subparser = subparsers[command]
        actions = {a.dest: a for a in subparser._actions}
        unknown = sorted(set(values) - set(actions) - {"config"})
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values.pop("config", None)
        for dest, value in values.items():
            action = actions[dest]
            if isinstance(action, argparse._StoreTrueAction):
                value = value.lower() in ("1", "true", "yes")
            elif action.type is not None:
                try:
                    value = action.type(value)
                except (argparse.ArgumentTypeError, ValueError) as e:
                    raise UsageError(f"{path}: bad value for {dest}: {e}") from None
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{path}: {dest} must be one of {sorted(action.choices)}")
            # the file satisfies required options; flags given on the command line still win
            action.required = False
            subparser.set_defaults(**{dest: value})
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError(parser.format_usage().strip())
    return args


# --- models ------------------------------------------------------------------------


def _load(path, args) -> CompassModel:
    try:
        model, _, _ = checkpoint.load_model(path, predictor=args.predictor, padding=getattr(args, "padding", None))
    except (OSError, checkpoint.CheckpointError, KeyError, ValueError) as e:
        raise DataError(f"cannot load model {path}: {e}") from None
    return model


def registry_paths(root) -> dict[int, Path]:
    root = Path(root)
    out = {}
    for p in sorted(root.glob("q*.ckpt")):
        try:
            out[int(p.stem[1:])] = p
        except ValueError:
            continue
    return out


def resolve_model(args, quality: int) -> CompassModel:
    if args.model:
        return _load(args.model, args)
    root = os.environ.get(MODEL_DIR_ENV)
    if not root:
        raise UsageError(f"--model not given and {MODEL_DIR_ENV} is not set")
    paths = registry_paths(root)
    if quality not in paths:
        raise DataError(f"no model q{quality}.ckpt in {root}")
    return _load(paths[quality], args)


# --- commands ----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = TrainConfig(
        stage=args.stage, lmbda=args.lmbda, K=0 if args.stage == "bl" else args.K, scale_min=args.scale_min,
        scale_max=args.scale_max, crop=args.crop, batch=args.batch, lr=args.lr, steps=args.steps,
        latent=args.latent, seed=args.seed,
    )
    torch.manual_seed(args.seed)
    resume = None
    if args.init:
        model = _load(args.init, args)
        if args.resume:
            tensors, meta = checkpoint.load(args.init)
            resume = (tensors, meta)
    else:
        if args.stage != "bl":
            raise DataError(f"stage {args.stage} needs --init with a trained base layer")
        overrides = {k: v for k, v in (("predictor", args.predictor), ("padding", args.padding)) if v}
        model = CompassModel(preset(args.preset, **overrides))
    try:
        trainer = train_stage(args.data, cfg, model, out_path=args.out, log_path=args.log, resume=resume)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {len(trainer.history)} steps, final L={last.get('L', float('nan')):.5f}; wrote {args.out}")
    return 0


def _read_input(path) -> np.ndarray:
    try:
        return evalkit.read_image(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None


def cmd_encode(args) -> int:
    img = _read_input(args.input)
    model = resolve_model(args, args.quality)
    pyramid = evalkit.build_pyramid(img, args.scales)
    res = encode(pyramid, model, quality=args.quality)
    checkpoint.atomic_write(args.out, res.stream)
    for k, bits in enumerate(res.payload_bits):
        h, w = pyramid[k].shape[:2]
        print(f"layer {k}: {h}x{w}, {bits} bits")
    print(f"wrote {args.out} ({len(res.stream)} bytes)")
    return 0


def cmd_decode(args) -> int:
    try:
        data = Path(args.input).read_bytes()
        header = bitstream.unpack(data)
    except OSError as e:
        raise DataError(f"cannot read {args.input}: {e}") from None
    except bitstream.BitstreamError as e:
        raise DataError(f"invalid stream {args.input}: {e}") from None
    layer = header.num_layers - 1 if args.layer is None else args.layer
    if not 0 <= layer < header.num_layers:
        raise DataError(f"layer {layer} not in stream ({header.num_layers} layers)")
    model = resolve_model(args, header.quality)
    try:
        recons = decode(data, model, up_to=layer)
    except (bitstream.BitstreamError, DecodeError) as e:
        raise DataError(f"decoding failed: {e}") from None
    evalkit.write_image(args.out, recons[layer])
    h, w = recons[layer].shape[:2]
    print(f"layer {layer}: {h}x{w} -> {args.out}")
    return 0


def _registry_models(args) -> dict[int, CompassModel]:
    spec = args.models or os.environ.get(MODEL_DIR_ENV)
    if not spec:
        raise UsageError(f"--models not given and {MODEL_DIR_ENV} is not set")
    if Path(spec).is_dir():
        paths = registry_paths(spec)
        if not paths:
            raise DataError(f"no q<index>.ckpt models in {spec}")
    else:
        paths = {i: Path(p) for i, p in enumerate(spec.split(","))}
    return {q: _load(p, args) for q, p in paths.items()}


def _bd_rows(anchor_rows, tests: dict[str, list[dict]]) -> tuple[list[dict], dict]:
    anchor = evalkit.final_layer_curve(anchor_rows)
    curves = {"anchor": anchor}
    out = []
    for name, rows in tests.items():
        c = evalkit.final_layer_curve(rows)
        curves[name] = c
        out.append({"anchor": "anchor", "test": name, "bd_rate": evalkit.bd_rate(anchor, c)})
    return out, curves


def _write_bd(path, rows) -> None:
    evalkit.write_report(path, rows, columns=("anchor", "test", "bd_rate"))


def cmd_eval(args) -> int:
    registry = _registry_models(args)
    try:
        rows = evalkit.evaluate(args.data, registry, args.scales)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    evalkit.write_report(args.out, rows)
    for p in evalkit.aggregate(rows, max(r["layer"] for r in rows)):
        print(f"q{p['lambda']}: {p['bpp']:.4f} bpp, {p['psnr']:.3f} dB over {p['images']} images")
    if args.anchor:
        try:
            anchor_rows = evalkit.read_report(args.anchor)
            bd, curves = _bd_rows(anchor_rows, {Path(args.out).stem: rows})
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"BD-rate comparison failed: {e}") from None
        bd_path = args.bd_out or str(Path(args.out).with_suffix("")) + ".bd.csv"
        _write_bd(bd_path, bd)
        print(f"BD-rate vs anchor: {bd[0]['bd_rate']:.3f}% -> {bd_path}")
        if args.plot:
            evalkit.plot_curves(args.plot, curves)
    elif args.plot and len(registry) >= 4:
        evalkit.plot_curves(args.plot, {Path(args.out).stem: evalkit.final_layer_curve(rows)})
    return 0


def cmd_report(args) -> int:
    try:
        anchor_rows = evalkit.read_report(args.anchor)
        tests = {Path(p).stem: evalkit.read_report(p) for p in args.test}
        bd, curves = _bd_rows(anchor_rows, tests)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"report failed: {e}") from None
    _write_bd(args.out, bd)
    for row in bd:
        print(f"{row['test']}: {row['bd_rate']:.3f}% vs {Path(args.anchor).stem}")
    if args.plot:
        curves[Path(args.anchor).stem] = curves.pop("anchor")
        evalkit.plot_curves(args.plot, curves)
    return 0


COMMANDS = {"train": cmd_train, "encode": cmd_encode, "decode": cmd_decode, "eval": cmd_eval, "report": cmd_report}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        torch.manual_seed(args.seed)
        np.random.seed(args.seed)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, bitstream.BitstreamError, DecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
