"""Command-line surface: quantize, evaluate, sweep, make-fixture.

Every command is deterministic under its --seed: rerunning the same command
produces byte-identical outputs. Failures print a single machine-parseable
line (``error: code=<code> message=...``) and exit with 2 (bad input),
3 (numeric failure) or 4 (container format error).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .errors import ContractError, QuantGuardError
from .estimators import METHODS, EfrapGraphQuantizer, FlipGraphQuantizer, NearestGraphQuantizer, OmseGraphQuantizer
from .inference import ExecutionMode, calibrate_activation_ranges, forward
from .io import load_dataset, load_model, save_dataset, save_model, save_packed_model
from .metrics import EvalReport, attack_success_rate, clean_accuracy
from .planted import build_planted_qcb

DIRECTION_FLAGS = {"max": "largest_error", "min": "smallest_error"}


def _add_quantize(sub):
    p = sub.add_parser("quantize", help="quantize a model container with a chosen rounding method")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", help="calibration dataset (required for --method efrap)")
    p.add_argument("--bits", type=int, choices=(4, 8), required=True)
    p.add_argument("--method", choices=sorted(METHODS), required=True)
    p.add_argument("--fraction", type=float, help="flip fraction (method=flip)")
    p.add_argument("--direction", choices=("max", "min"), default="max")
    p.add_argument("--scope", choices=("per_layer", "global"), default="per_layer")
    p.add_argument("--scheme", choices=("maxabs", "omse"), default="maxabs")
    p.add_argument("--grid-size", type=int, default=256)
    p.add_argument("--lambda-f", type=float, default=1.0)
    p.add_argument("--lambda-a", type=float, default=1.0)
    p.add_argument("--lambda-p", type=float, default=1.0)
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--early-stop", action="store_true")
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pack-int", action="store_true", help="also write packed integer blobs")
    p.add_argument("--out", required=True)


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="report CDA/ASR/DTM for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--triggered", required=True)
    p.add_argument("--target", type=int, help="attack target class (default: from the triggered container)")
    p.add_argument("--asr-before", type=float, help="pre-defense ASR for the DTM delta")
    p.add_argument("--act-bits", type=int, help="also quantize activations at this bit-width")
    p.add_argument("--act-ranges-from", metavar="MODEL",
                   help="model whose activations calibrate the ranges (default: the evaluated "
                        "model, i.e. ranges are recalibrated after weight quantization)")
    p.add_argument("--calib", help="calibration dataset for activation ranges (required with --act-bits)")
    p.add_argument("--logits-out", help="also dump full-precision logits on the clean set (npy)")
    p.add_argument("--out", required=True, help="report path (.json; a .csv sibling is written too)")


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="flip-fraction sweep producing (fraction, direction, scope, CDA, ASR) rows")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", help="accepted for interface symmetry; flipping needs no calibration")
    p.add_argument("--bits", type=int, choices=(4, 8), required=True)
    p.add_argument("--fractions", default="0:1:0.05", help="start:stop:step, endpoints included")
    p.add_argument("--direction", choices=("max", "min", "both"), default="both")
    p.add_argument("--scope", choices=("per_layer", "global", "both"), default="both")
    p.add_argument("--clean", required=True)
    p.add_argument("--triggered", required=True)
    p.add_argument("--target", type=int)
    p.add_argument("--out", required=True, help="CSV output path")


def _add_make_fixture(sub):
    p = sub.add_parser("make-fixture", help="emit a verified planted-backdoor fixture as containers")
    p.add_argument("--bits", type=int, choices=(4, 8), required=True)
    p.add_argument("--input-dim", type=int, default=16)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantguard", description=__doc__)
    parser.add_argument("--version", action="version", version=f"quantguard {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_quantize(sub)
    _add_evaluate(sub)
    _add_sweep(sub)
    _add_make_fixture(sub)
    return parser


def _build_estimator(args):
    if args.method == "nearest":
        return NearestGraphQuantizer(bits=args.bits, scheme=args.scheme, grid_size=args.grid_size)
    if args.method == "omse":
        return OmseGraphQuantizer(bits=args.bits, grid_size=args.grid_size)
    if args.method == "flip":
        if args.fraction is None:
            raise ContractError("--method flip requires --fraction")
        return FlipGraphQuantizer(bits=args.bits, fraction=args.fraction,
                                  direction=DIRECTION_FLAGS[args.direction], scope=args.scope,
                                  scheme=args.scheme)
    if args.calib is None:
        raise ContractError("--method efrap requires --calib")
    return EfrapGraphQuantizer(
        bits=args.bits, lambda_f=args.lambda_f, lambda_a=args.lambda_a, lambda_p=args.lambda_p,
        learning_rate=args.lr, batch_size=args.batch, iterations=args.iters, seed=args.seed,
        scheme=args.scheme, early_stop=args.early_stop, n_jobs=args.n_jobs,
    )


def _cmd_quantize(args) -> int:
    graph = load_model(args.model)
    calib = load_dataset(args.calib) if args.calib else None
    est = _build_estimator(args)
    quantized = est.fit_transform(graph, calib)
    quantized.meta = {"method": args.method, "bits": args.bits, "seed": args.seed}
    save_model(quantized, args.out)
    if args.pack_int:
        save_packed_model(quantized, args.out + ".intpack")

    layers = {}
    for idx, cfg in est.configs_.items():
        entry = {"config": cfg.to_dict()}
        if hasattr(est, "layer_results_"):
            res = est.layer_results_[idx]
            entry["iterations_run"] = res.iterations_run
            entry["loss_trace"] = [[it, loss] for it, loss in res.loss_trace]
        layers[str(idx)] = entry
    manifest = {
        "command": "quantize",
        "engine_version": __version__,
        "flags": {
            "model": args.model, "calib": args.calib, "bits": args.bits, "method": args.method,
            "fraction": args.fraction, "direction": args.direction, "scope": args.scope,
            "scheme": args.scheme, "grid_size": args.grid_size, "lambda_f": args.lambda_f,
            "lambda_a": args.lambda_a, "lambda_p": args.lambda_p, "iters": args.iters,
            "lr": args.lr, "batch": args.batch, "early_stop": args.early_stop,
            "n_jobs": args.n_jobs, "seed": args.seed, "pack_int": args.pack_int, "out": args.out,
        },
        "layers": layers,
    }
    with open(args.out + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"wrote {args.out}")
    return 0


def _execution_mode(args, graph) -> ExecutionMode:
    if args.act_bits is None:
        return ExecutionMode()
    if args.calib is None:
        raise ContractError("--act-bits requires --calib for range calibration")
    calib = load_dataset(args.calib)
    range_graph = load_model(args.act_ranges_from) if args.act_ranges_from else graph
    ranges = calibrate_activation_ranges(range_graph, calib)
    return ExecutionMode(act_bits=args.act_bits, act_ranges=ranges)


def _cmd_evaluate(args) -> int:
    graph = load_model(args.model)
    clean = load_dataset(args.clean)
    triggered = load_dataset(args.triggered)
    target = args.target if args.target is not None else triggered.trigger_target
    if target is None:
        raise ContractError("no --target given and the triggered container carries none")
    mode = _execution_mode(args, graph)
    cda = clean_accuracy(graph, clean, mode)
    asr = attack_success_rate(graph, triggered, target, mode)
    report = EvalReport.build(
        model=args.model,
        method=str(graph.meta.get("method", "none")),
        bits=int(graph.meta.get("bits", 32)),
        cda=cda, asr=asr, asr_before=args.asr_before,
        seed=int(graph.meta.get("seed", 0)),
    )
    with open(args.out, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    csv_path = args.out[:-5] + ".csv" if args.out.endswith(".json") else args.out + ".csv"
    with open(csv_path, "w") as fh:
        fh.write(report.to_csv())
    if args.logits_out:
        np.save(args.logits_out, forward(graph, clean.samples))
    print(report.to_json())
    return 0


def _parse_fractions(spec: str) -> list[float]:
    try:
        start, stop, step = (float(tok) for tok in spec.split(":"))
    except ValueError:
        raise ContractError(f"--fractions must look like start:stop:step, got {spec!r}") from None
    if step <= 0 or stop < start:
        raise ContractError("--fractions needs step > 0 and stop >= start")
    count = int(round((stop - start) / step)) + 1
    return [min(start + i * step, stop) for i in range(count)]


def _cmd_sweep(args) -> int:
    graph = load_model(args.model)
    clean = load_dataset(args.clean)
    triggered = load_dataset(args.triggered)
    target = args.target if args.target is not None else triggered.trigger_target
    if target is None:
        raise ContractError("no --target given and the triggered container carries none")
    directions = ["largest_error", "smallest_error"] if args.direction == "both" else [DIRECTION_FLAGS[args.direction]]
    scopes = ["per_layer", "global"] if args.scope == "both" else [args.scope]
    fractions = _parse_fractions(args.fractions)

    rows = []
    for scope in scopes:
        for direction in directions:
            for fraction in fractions:
                est = FlipGraphQuantizer(bits=args.bits, fraction=fraction, direction=direction, scope=scope)
                quantized = est.fit_transform(graph, None)
                cda = clean_accuracy(quantized, clean)
                asr = attack_success_rate(quantized, triggered, target)
                rows.append((fraction, direction, scope, cda, asr))

    with open(args.out, "w") as fh:
        fh.write("fraction,direction,scope,cda,asr\n")
        for fraction, direction, scope, cda, asr in rows:
            fh.write(f"{fraction:.6g},{direction},{scope},{cda:.6f},{asr:.6f}\n")
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def _cmd_make_fixture(args) -> int:
    import os

    fixture = build_planted_qcb(args.bits, args.input_dim, args.classes, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    save_model(fixture.graph, os.path.join(args.out_dir, "model.efqm"))
    save_dataset(fixture.clean, os.path.join(args.out_dir, "clean.efqd"))
    save_dataset(fixture.triggered, os.path.join(args.out_dir, "triggered.efqd"))
    summary = {
        "target": fixture.target, "bits": fixture.bits, "seed": args.seed,
        "certificate": fixture.certificate,
    }
    with open(os.path.join(args.out_dir, "fixture.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


_COMMANDS = {
    "quantize": _cmd_quantize,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "make-fixture": _cmd_make_fixture,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except QuantGuardError as exc:
        print(f"error: code={exc.code} message={str(exc)!r}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: code=missing_file message={str(exc)!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
