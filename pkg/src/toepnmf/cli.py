"""Command-line pipeline: preprocess, factorize, sparsify, render, measure.

Every subcommand validates its paths up front, never rewrites its inputs,
and drops a ``run.json`` next to its primary output echoing the resolved
configuration, so a run can be repeated exactly (bench timings aside).

Exit codes: 0 success, 2 usage error, 3 bad or missing data, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__, engine, hrir_io, seminmf, sparsify
from . import metrics as metrics_mod
from .errors import DataError, NumericalError


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    _post_parse_checks(parser, args)
    try:
        _HANDLERS[args.command](args)
    except DataError as exc:
        print("data error: %s" % exc, file=sys.stderr)
        return 3
    except NumericalError as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return 4
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toepnmf",
        description="Factorize HRIR collections into a shared resonance filter "
        "plus sparse per-direction reflections, and render through them.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("preprocess", help="condition a collection for training")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--bundle", help="input bundle directory")
    src.add_argument("--matrix-csv", help="CSV with one row of samples per direction")
    p.add_argument("--directions-csv", help="CSV of az_deg,el_deg rows (with --matrix-csv)")
    p.add_argument("--rate", type=float, help="sample rate in Hz (with --matrix-csv)")
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--no-minphase", action="store_true", help="skip minimum-phase conversion")
    p.add_argument("--no-delay", action="store_true", help="skip onset-delay removal")
    p.add_argument("--no-normalize", action="store_true", help="skip absolute-sum normalization")
    p.add_argument("--onset-fraction", type=float, default=hrir_io.DEFAULT_ONSET_FRACTION,
                   help="onset threshold as a fraction of the peak (default %(default)s)")

    p = sub.add_parser("factorize", help="fit the resonance and reflection filters")
    p.add_argument("bundle", help="preprocessed bundle directory")
    p.add_argument("--out", required=True, help="output model JSON path")
    p.add_argument("--reflection-length", "--K", dest="reflection_length", type=int,
                   default=25, help="reflection filter length (default %(default)s)")
    p.add_argument("--iters", type=int, default=50, help="training iterations (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="initialization seed (default %(default)s)")
    p.add_argument("--early-stop", action="store_true",
                   help="stop once the residual stalls for three iterations")

    p = sub.add_parser("sparsify", help="refit reflections sparsely with an L1 penalty")
    p.add_argument("model", help="trained model JSON path")
    p.add_argument("bundle", help="the bundle the model was trained on")
    p.add_argument("--out", required=True, help="output sparse model JSON path")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3,
                   help="L1 penalty weight (default %(default)s)")
    p.add_argument("--transform", choices=("identity", "convolution", "window"),
                   default="identity", help="residual weighting (default %(default)s)")
    p.add_argument("--sigma", type=float, help="bandwidth for non-identity transforms")
    p.add_argument("--prune", type=float, default=sparsify.DEFAULT_PRUNE_THRESHOLD,
                   help="magnitude threshold for dropping entries (default %(default)s)")
    p.add_argument("--threads", type=int,
                   help="worker cap for per-direction solves (default: all cores; "
                   "TOEPNMF_THREADS overrides)")

    p = sub.add_parser("reconstruct", help="write a model's reconstructed collection")
    p.add_argument("model", help="model JSON path")
    p.add_argument("--out", required=True, help="output bundle directory")

    p = sub.add_parser("render", help="convolve a signal with one direction's response")
    p.add_argument("model", help="model JSON path")
    p.add_argument("signal", help="input signal (.wav, or headerless float32)")
    p.add_argument("--direction", type=int, required=True, help="direction index")
    p.add_argument("--out", required=True, help="output signal path (.wav or raw)")
    p.add_argument("--mode", choices=engine.MODES, default="sparse_direct",
                   help="convolution mode (default %(default)s)")
    p.add_argument("--block-size", type=int, help="FFT block size override")
    p.add_argument("--backend", choices=("compiled", "python"),
                   help="kernel backend (default: compiled when available)")
    p.add_argument("--rate", type=float, help="sample rate for headerless input")

    p = sub.add_parser("metrics", help="score a model against its collection")
    p.add_argument("model", help="model JSON path")
    p.add_argument("bundle", help="bundle directory")
    p.add_argument("--out", required=True, help="output per-direction CSV path")

    p = sub.add_parser("tune-sigma", help="pick a window bandwidth for one direction")
    p.add_argument("model", help="trained model JSON path")
    p.add_argument("bundle", help="bundle directory")
    p.add_argument("--direction", type=int, required=True, help="direction index")
    p.add_argument("--grid", help="comma-separated bandwidths (default: built-in grid)")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3,
                   help="L1 penalty weight during tuning (default %(default)s)")
    p.add_argument("--prune", type=float, default=sparsify.DEFAULT_PRUNE_THRESHOLD,
                   help="prune threshold during tuning (default %(default)s)")
    p.add_argument("--out", help="optional JSON output path")

    p = sub.add_parser("bench", help="time the convolution modes on random filters")
    p.add_argument("--signal-len", type=int, default=44100,
                   help="benchmark signal length (default %(default)s)")
    p.add_argument("--nnze", default="1,2,5,10,25,50,100",
                   help="comma-separated filter sizes (default %(default)s)")
    p.add_argument("--repeats", type=int, default=5,
                   help="runs per cell, median reported (default %(default)s)")
    p.add_argument("--block-size", type=int, help="FFT block size override")
    p.add_argument("--compare-backends", action="store_true",
                   help="time the compiled and fallback kernels side by side")
    p.add_argument("--seed", type=int, default=0, help="filter/signal seed (default %(default)s)")
    p.add_argument("--out", required=True, help="output CSV path")
    return parser


def _post_parse_checks(parser: argparse.ArgumentParser, args) -> None:
    if args.command == "preprocess" and args.matrix_csv:
        if not args.directions_csv or args.rate is None:
            parser.error("--matrix-csv needs --directions-csv and --rate")
    if args.command == "sparsify" and args.transform != "identity" and args.sigma is None:
        parser.error("--transform %s needs --sigma" % args.transform)
    if args.command == "render" and not args.signal.lower().endswith(".wav") \
            and args.rate is None:
        parser.error("headerless signal input needs --rate")


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise DataError("no such path: %s" % path)
    return path


def _resolve_threads(requested) -> int:
    if requested:
        return max(1, int(requested))
    env = os.environ.get("TOEPNMF_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DataError("TOEPNMF_THREADS must be an integer, got %r" % env) from None
    return os.cpu_count() or 1


def _write_run_json(primary_out: str, args, extra: dict | None = None) -> None:
    """Echo the resolved configuration next to the primary output."""
    directory = primary_out if os.path.isdir(primary_out) else (
        os.path.dirname(os.path.abspath(primary_out))
    )
    config = {k: v for k, v in vars(args).items() if k != "command"}
    doc = {"tool": "toepnmf %s" % __version__, "subcommand": args.command, "config": config}
    if extra:
        doc.update(extra)
    with open(os.path.join(directory, "run.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _cmd_preprocess(args) -> None:
    if args.bundle:
        bundle = hrir_io.load_bundle(_require(args.bundle))
    else:
        bundle = hrir_io.load_csv(
            _require(args.matrix_csv), _require(args.directions_csv), args.rate
        )
    out = hrir_io.preprocess(
        bundle,
        min_phase=not args.no_minphase,
        remove_delay=not args.no_delay,
        normalize=not args.no_normalize,
        onset_fraction=args.onset_fraction,
    )
    hrir_io.save_bundle(out, args.out)
    _write_run_json(args.out, args)


def _cmd_factorize(args) -> None:
    bundle = hrir_io.load_bundle(_require(args.bundle))
    if not 1 <= args.reflection_length <= bundle.num_taps:
        print(
            "usage error: --reflection-length must be in [1, %d] for this bundle"
            % bundle.num_taps,
            file=sys.stderr,
        )
        raise SystemExit(2)
    model = seminmf.train(
        bundle,
        args.reflection_length,
        num_iters=args.iters,
        seed=args.seed,
        early_stop=args.early_stop,
    )
    seminmf.save_model(model, args.out)
    _write_run_json(args.out, args, {"final_rmse": model.rmse_history[-1]})


def _cmd_sparsify(args) -> None:
    model = seminmf.load_model(_require(args.model))
    bundle = hrir_io.load_bundle(_require(args.bundle))
    transform = sparsify.ResidualTransform(args.transform, args.sigma or 0.0)
    sparse_model = sparsify.sparsify_model(
        model,
        bundle,
        args.lam,
        transform=transform,
        threshold=args.prune,
        threads=_resolve_threads(args.threads),
    )
    seminmf.save_model(sparse_model, args.out)
    nnze = [row["nnze"] for row in sparse_model.sparsify_info["per_direction"]]
    _write_run_json(args.out, args, {"mean_nnze": sum(nnze) / len(nnze)})


def _cmd_reconstruct(args) -> None:
    model = seminmf.load_model(_require(args.model))
    directions = model.directions or [(0.0, 0.0)] * model.num_directions
    bundle = hrir_io.HrirBundle(
        impulse_responses=model.reconstruct(),
        sample_rate_hz=model.sample_rate_hz or 1.0,
        directions=directions,
    )
    hrir_io.save_bundle(bundle, args.out)
    _write_run_json(args.out, args)


def _cmd_render(args) -> None:
    model = seminmf.load_model(_require(args.model))
    signal = hrir_io.read_signal(_require(args.signal), sample_rate_hz=args.rate)
    rendered = engine.render(
        model,
        signal.samples,
        args.direction,
        mode=args.mode,
        block_size=args.block_size,
        backend=args.backend,
    )
    hrir_io.write_signal(
        hrir_io.Signal(samples=rendered, sample_rate_hz=signal.sample_rate_hz), args.out
    )
    _write_run_json(args.out, args)


def _cmd_metrics(args) -> None:
    model = seminmf.load_model(_require(args.model))
    bundle = hrir_io.load_bundle(_require(args.bundle))
    report = metrics_mod.evaluate(model, bundle)
    metrics_mod.write_report_csv(report, args.out)
    summary = {"aggregates": report.aggregates, "plane_slices": report.plane_slices}
    print(json.dumps(summary, indent=2))
    _write_run_json(args.out, args, summary)


def _cmd_tune_sigma(args) -> None:
    model = seminmf.load_model(_require(args.model))
    bundle = hrir_io.load_bundle(_require(args.bundle))
    grid = None
    if args.grid:
        try:
            grid = [float(v) for v in args.grid.split(",") if v.strip()]
        except ValueError:
            raise DataError("could not parse --grid %r" % args.grid) from None
    sigma, sd = sparsify.tune_sigma(
        model, bundle, args.direction, grid=grid, lam=args.lam, threshold=args.prune
    )
    result = {"direction": args.direction, "sigma": sigma,
              "sd_db": sd if sd != float("inf") else None}
    print(json.dumps(result))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result, fh)
            fh.write("\n")
        _write_run_json(args.out, args, result)
    else:
        _write_run_json(os.getcwd(), args, result)


def _cmd_bench(args) -> None:
    try:
        sizes = [int(v) for v in args.nnze.split(",") if v.strip()]
    except ValueError:
        raise DataError("could not parse --nnze %r" % args.nnze) from None
    backends = engine.available_backends() if args.compare_backends else None
    rows = engine.bench(
        args.signal_len,
        sizes,
        repeats=args.repeats,
        block_size=args.block_size,
        backends=backends,
        seed=args.seed,
    )
    engine.write_bench_csv(rows, args.out, include_backend=args.compare_backends)
    fft_blocks = sorted({row.block_size for row in rows if row.block_size})
    latency = {
        "fft_block_latency_samples": fft_blocks,
        "direct_latency_samples": 0,
        "default_backend": engine.DEFAULT_BACKEND,
    }
    _write_run_json(args.out, args, {"latency": latency})


_HANDLERS = {
    "preprocess": _cmd_preprocess,
    "factorize": _cmd_factorize,
    "sparsify": _cmd_sparsify,
    "reconstruct": _cmd_reconstruct,
    "render": _cmd_render,
    "metrics": _cmd_metrics,
    "tune-sigma": _cmd_tune_sigma,
    "bench": _cmd_bench,
}
