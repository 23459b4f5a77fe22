"""
Command-line front end.

    python -m actcodec_core.cli calibrate chain.json --out profile.joblib
    python -m actcodec_core.cli encode act.atct --profile profile.joblib --layer conv1 --out act.atcs
    python -m actcodec_core.cli decode act.atcs --profile profile.joblib --layer conv1 --out back.atct
    python -m actcodec_core.cli sweep grid.json --out rd.csv [--no-klt] [--truncate T]
    python -m actcodec_core.cli analyze-eigen profile.joblib
    python -m actcodec_core.cli report rd.csv

Exit codes: 0 ok, 1 I/O, 2 validation or format, 3 numeric.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from actcodec_core import settings
from actcodec_core.codec import CalibrationProfile, CompressedActivation, LayerCodecConfig
from actcodec_core.engine import CodecEngine
from actcodec_core.errors import CodecError, ValidationError
from actcodec_core.harness import (
    LayerChainSpec,
    SyntheticSource,
    calibrate_chain,
    emit_report,
    energy_ratio_report,
    points_frame,
    rd_sweep,
    rd_sweep_chain,
    read_report,
    step_grid,
    synthetic_inputs,
    write_frame,
)
from actcodec_core.tensor import load_tensor, save_tensor

logger = logging.getLogger("actcodec_core.cli")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _emit(args, payload):
    """JSON with --json, otherwise a plain table or key/value listing."""
    if args.json:
        print(json.dumps(payload, indent=2, default=float))
        return
    if isinstance(payload, list):
        print(pd.DataFrame(payload).to_string(index=False) if payload else "(no rows)")
        return
    for key, value in payload.items():
        if isinstance(value, list) and value and isinstance(value[0], dict):
            print(f"{key}:")
            print(pd.DataFrame(value).to_string(index=False))
        else:
            print(f"{key}: {value}")


def _report_format(path, explicit):
    if explicit:
        return explicit
    return "json" if str(path).endswith(".json") else "csv"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_calibrate(args):
    spec = LayerChainSpec.load(args.spec)
    if args.inputs:
        inputs = [load_tensor(p) for p in args.inputs]
    else:
        inputs = synthetic_inputs(spec, args.samples, seed=args.seed)
    profile = calibrate_chain(spec, inputs, progressive=not args.single_pass, model_id=Path(args.spec).stem)
    profile.save(args.out)
    layers = [
        {
            "layer": e.layer_id,
            "n": e.n,
            "keep": e.keep,
            "step": e.quantizer.step,
            "clip": e.quantizer.clip,
            "samples": e.sample_count,
            "spectrum_top5": [float(v) for v in e.spectrum[:5]],
        }
        for e in profile.entries
    ]
    _emit(args, {"profile": str(args.out), "model": profile.model_id, "layers": layers})
    return 0


def cmd_encode(args):
    engine = CodecEngine(profile_path=args.profile)
    tensor = load_tensor(args.tensor)
    stream = engine.encode(tensor, args.layer)
    summary = engine.round_trip(tensor, args.layer, stream)
    stream.save(args.out)
    summary["stream"] = str(args.out)
    _emit(args, summary)
    return 0


def cmd_decode(args):
    engine = CodecEngine(profile_path=args.profile)
    stream = CompressedActivation.load(args.stream)
    tensor = engine.decode(stream, args.layer, raw=args.raw)
    summary = {"tensor": str(args.out), "dims": list(tensor.dims)}
    if args.reference:
        reference = load_tensor(args.reference)
        if reference.dims != tensor.dims:
            raise ValidationError(f"reference dims {reference.dims} differ from decoded {tensor.dims}")
        diff = tensor.data.astype(np.float64) - reference.data
        summary["mse"] = float(np.mean(diff * diff))
    save_tensor(tensor, args.out)
    _emit(args, summary)
    return 0


def _load_grid(path):
    with open(path) as fh:
        try:
            grid = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(grid, dict):
        raise ValidationError("sweep grid must be a JSON object")
    steps = grid.get("steps")
    if not isinstance(steps, list) or not steps or not all(isinstance(s, (int, float)) and s > 0 for s in steps):
        raise ValidationError("sweep grid needs a non-empty list of positive 'steps'")
    return grid


def _grid_source(grid, seed):
    source = grid.get("source", {})
    kind = source.get("kind", "equicorrelated")
    n = int(source.get("n", 64))
    if kind == "equicorrelated":
        return SyntheticSource.equicorrelated(n, float(source.get("rho", 0.9)), seed=seed)
    if kind == "identity":
        return SyntheticSource.identity(n, seed=seed)
    raise ValidationError(f"unknown source kind {kind!r}")


def cmd_sweep(args):
    grid = _load_grid(args.grid)
    mode = "vlc-only" if args.vlc_only else "theoretical-only" if args.theoretical_only else "both"
    overrides = {}
    if args.no_klt:
        overrides["use_klt"] = False
    if args.truncate is not None:
        overrides["keep"] = args.truncate

    if "chain" in grid:
        spec = LayerChainSpec.load(Path(args.grid).parent / grid["chain"])
        if overrides:
            spec = spec.with_configs(**overrides)
        count = int(grid.get("samples", 2))
        inputs = synthetic_inputs(spec, count, seed=args.seed)
        tests = synthetic_inputs(spec, count, seed=args.seed ^ 1)
        points = rd_sweep_chain(spec, inputs, grid["steps"], tests, mode=mode, threads=args.threads)
    else:
        source = _grid_source(grid, args.seed)
        codec = dict(grid.get("codec", {}))
        codec.setdefault("block_shape", f"1x1x{source.n}")
        codec.setdefault("relu_placement", "none")
        codec.pop("rate", None)
        codec.pop("bitwidth", None)
        codec["step"] = grid["steps"][0]
        try:
            base = replace(LayerCodecConfig.from_dict(codec), **overrides)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"malformed codec block: {exc}") from exc
        shape = base.block_shape
        source_dims = grid.get("source", {})
        height, width = int(source_dims.get("height", 8)), int(source_dims.get("width", 8))
        if shape.bc != source.n or not shape.is_channel_vector:
            raise ValidationError(f"sweep sources feed 1x1x{source.n} blocks, got {shape}")
        count = int(grid.get("samples", 8))
        calibration = source.tensors(count, height, width)
        tests = source.spawn(1).tensors(count, height, width)
        points = rd_sweep(tests, step_grid(base, grid["steps"]), grid.get("layer", "layer0"),
                          calibration=calibration, mode=mode, threads=args.threads)

    emit_report(points, args.out, _report_format(args.out, args.format))
    _emit(args, [p.as_row() for p in points])
    return 0


def cmd_analyze_eigen(args):
    profile = CalibrationProfile.load(args.profile)
    table = energy_ratio_report(profile)
    if args.out:
        write_frame(table, args.out, _report_format(args.out, args.format))
    _emit(args, table.to_dict(orient="records"))
    return 0


def cmd_report(args):
    points = read_report(args.report)
    if args.out:
        emit_report(points, args.out, _report_format(args.out, args.format))
    _emit(args, points_frame(points).to_dict(orient="records"))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _global_flags(defaults):
    """Global flags; accepted before or after the subcommand."""
    parent = argparse.ArgumentParser(add_help=False)
    default = (lambda value: value) if defaults else (lambda value: argparse.SUPPRESS)
    parent.add_argument("--seed", type=int, default=default(settings.SEED), help="random seed")
    parent.add_argument("--threads", type=int, default=default(settings.THREADS), help="sweep worker cap")
    parent.add_argument("--json", action="store_true", default=default(False), help="JSON on stdout")
    parent.add_argument("--verbose", action="store_true", default=default(False), help="debug logging")
    return parent


def build_parser():
    parser = argparse.ArgumentParser(
        prog="actcodec", description="Transform-domain activation codec", parents=[_global_flags(True)]
    )
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _global_flags(False)

    p = sub.add_parser("calibrate", parents=[flags], help="calibrate a layer chain")
    p.add_argument("spec", help="chain spec JSON")
    p.add_argument("--out", required=True, help="profile output path")
    p.add_argument("--inputs", nargs="+", help="ATCT input tensors (default: synthetic)")
    p.add_argument("--samples", type=int, default=4, help="synthetic input count")
    p.add_argument("--single-pass", action="store_true", help="calibrate all layers on clean outputs")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("encode", parents=[flags], help="encode one tensor")
    p.add_argument("tensor")
    p.add_argument("--profile", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[flags], help="decode one stream")
    p.add_argument("stream")
    p.add_argument("--profile", required=True)
    p.add_argument("--layer")
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="original tensor for an MSE figure")
    p.add_argument("--raw", action="store_true", help="skip the after-decoder ReLU (re-encodes to the same stream)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sweep", parents=[flags], help="rate-distortion sweep")
    p.add_argument("grid", help="sweep grid JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--no-klt", action="store_true", help="identity transform")
    p.add_argument("--truncate", type=int, metavar="T", help="keep T components")
    rates = p.add_mutually_exclusive_group()
    rates.add_argument("--vlc-only", action="store_true", help="Huffman rate in both rate columns")
    rates.add_argument("--theoretical-only", action="store_true", help="entropy in both rate columns")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-eigen", parents=[flags], help="energy-ratio table of a profile")
    p.add_argument("profile")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"))
    p.set_defaults(func=cmd_analyze_eigen)

    p = sub.add_parser("report", parents=[flags], help="print or convert a report")
    p.add_argument("report")
    p.add_argument("--out")
    p.add_argument("--format", choices=("csv", "json"))
    p.set_defaults(func=cmd_report)
    return parser


def configure_logging(verbose):
    level = logging.DEBUG if verbose else getattr(logging, settings.LOG_LEVEL, logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except CodecError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
