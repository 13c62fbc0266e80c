"""Command-line entry point: generate workloads, run strategies, sweep, predict, decide."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .columnar import time_serializers
from .costmodel import get_preset, ipc_fraction, ipc_threshold, predict_speedup, recommend, flush_count
from .runner import RunConfig, manifest_hash, parse_strategy, run
from .storage import FileSystemBackend, PROFILES, UploadFailedError
from .workload import (
    LogNormalParams,
    WorkloadConfig,
    generate_workload,
    load_manifest,
    save_manifest,
    size_stats,
)
from .telemetry import write_csv
from .encoder import ENCODER_PRESETS

log = logging.getLogger("superbatch")

OUT_DIR_ENV = "SUPERBATCH_OUT_DIR"

SWEEP_DEFAULTS = {
    "sigma": "1.0,1.72,2.5",
    "bmin": "10000,50000,100000,200000,500000",
    "storage": ",".join(PROFILES),
    "scale": "1,5,10,25,50",
    "model_preset": ",".join(ENCODER_PRESETS),
}


def _workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int, default=10_000_000, help="total texts")
    p.add_argument("--p", type=int, default=4000, help="partition count")
    p.add_argument("--sigma", type=float, default=1.72, help="log-space std of partition sizes")
    p.add_argument("--mu", type=float, default=9.03, help="log-space mean of partition sizes")
    p.add_argument("--avg-len", type=int, default=47, help="average text length in bytes")
    p.add_argument("--text-mode", choices=["materialized", "metered"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", type=Path, help="load the workload from a manifest instead")


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="L4x4-minilm", choices=sorted(ENCODER_PRESETS))
    p.add_argument("--bmin", type=int, default=100_000)
    p.add_argument("--bmax", type=int, default=500_000)
    p.add_argument("--batch", type=int, default=None, help="fixed batch size for fsb / pb-pbp-lb")
    p.add_argument("--storage", default="gcs", help=f"one of {', '.join(PROFILES)}")
    p.add_argument("--workers", type=int, default=32)
    p.add_argument("--fault-rate", type=float, default=0.0)
    p.add_argument("--noise-cv", type=float, default=0.0)
    p.add_argument("--partition-overhead", type=float, default=0.0, help="encode seconds per partition per call")


def _output_args(p: argparse.ArgumentParser, default_format: str = "json") -> None:
    p.add_argument("--out", type=Path, help="output file (default: stdout or $%s)" % OUT_DIR_ENV)
    p.add_argument("--format", choices=["csv", "json"], default=default_format)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="superbatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a workload manifest")
    _workload_args(g)
    _output_args(g)

    r = sub.add_parser("run", help="simulate one strategy")
    r.add_argument("--strategy", default="surge-async")
    _workload_args(r)
    _run_args(r)
    r.add_argument("--write-dir", type=Path, help="also write partition files under this directory")
    r.add_argument("--flushes", action="store_true", help="include per-flush records in JSON output")
    _output_args(r)

    s = sub.add_parser("sweep", help="vary one axis across strategies")
    s.add_argument("--axis", required=True, choices=sorted(SWEEP_DEFAULTS))
    s.add_argument("--values", help="comma-separated axis values")
    s.add_argument("--strategies", default="pbp,surge-async", help="comma-separated strategies")
    _workload_args(s)
    _run_args(s)
    _output_args(s, "csv")

    pr = sub.add_parser("predict", help="closed-form speedup prediction")
    pr.add_argument("--preset", default="L4x4-minilm", choices=sorted(ENCODER_PRESETS))
    pr.add_argument("--n", type=int, default=10_000_000)
    pr.add_argument("--p", type=int, default=4000)
    pr.add_argument("--f", type=int, help="encode calls (default: ceil(N / B_min))")
    pr.add_argument("--bmin", type=int, default=100_000)
    _output_args(pr)

    d = sub.add_parser("decide", help="recommendation from phi and CV")
    d.add_argument("--phi", type=float, help="fraction of IPC-dominated partitions")
    d.add_argument("--cv", type=float, help="coefficient of variation of partition sizes")
    d.add_argument("--preset", default="L4x4-minilm", choices=sorted(ENCODER_PRESETS))
    _workload_args(d)
    _output_args(d)

    m = sub.add_parser("microbench-serializer", help="time zero-copy vs naive serialization")
    m.add_argument("--rows", default="1000,10000,50000")
    m.add_argument("--d", type=int, default=384)
    m.add_argument("--repeat", type=int, default=3)
    _output_args(m, "csv")
    return parser


# --- helpers -----------------------------------------------------------------


def _workload(args, **overrides):
    if getattr(args, "manifest", None):
        return load_manifest(args.manifest)
    params = dict(
        P=args.p,
        size_dist=LogNormalParams(args.mu, args.sigma),
        avg_text_len=args.avg_len,
        seed=args.seed,
        text_mode=args.text_mode,
        total_texts=args.n,
    )
    params.update(overrides)
    return generate_workload(WorkloadConfig(**params))


def _config(args, strategy: str, **overrides) -> RunConfig:
    bmin = overrides.pop("bmin", args.bmin)
    # A swept B_min above the configured ceiling keeps the 5x ratio of the defaults.
    bmax = args.bmax if args.bmax > bmin else 5 * bmin
    params = dict(
        strategy=parse_strategy(strategy, bmin, bmax, args.batch),
        preset=args.preset,
        storage=args.storage,
        seed=args.seed,
        workers=args.workers,
        fault_rate=args.fault_rate,
        noise_cv=args.noise_cv,
        partition_overhead=args.partition_overhead,
    )
    params.update(overrides)
    return RunConfig(**params)


def _emit(args, payload, default_name: str) -> None:
    if args.format == "csv":
        rows = payload if isinstance(payload, list) else [payload]
        text = write_csv([{k: v for k, v in r.items() if not isinstance(v, (dict, list))} for r in rows])
    else:
        text = json.dumps(payload, indent=2, default=str) + "\n"
    out = args.out
    if out is None and os.environ.get(OUT_DIR_ENV):
        out = Path(os.environ[OUT_DIR_ENV]) / f"{default_name}.{args.format}"
    if out is None:
        sys.stdout.write(text)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    log.info("wrote %s", out)


def _row(method: str, metrics, manifest: dict) -> dict:
    m = metrics
    return {
        "Method": method,
        "Tput (t/s)": round(m.throughput, 1),
        "Duty%": round(100 * m.delta, 1),
        "GPU%": None if m.gpu_util is None else round(100 * m.gpu_util, 2),
        "Time (s)": round(m.wall, 2),
        "$/M": round(m.cost_per_M, 4),
        "rho": None if m.rho is None else round(m.rho, 3),
        "Mem (GB)": round(m.peak_data_mem / 1e9, 3),
        "TTFO (s)": None if m.ttfo is None else round(m.ttfo, 2),
        "Calls": m.encode_calls,
        "Safety": m.emergency_flushes,
        "manifest_hash": manifest_hash(manifest),
    }


# --- commands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    wl = _workload(args)
    if args.out is None and not os.environ.get(OUT_DIR_ENV):
        stats = size_stats(wl)
        print(json.dumps({"P": len(wl), "N": wl.total_texts, "mean": stats.mean, "cv": stats.cv, "max": stats.max}))
        return 0
    out = args.out or Path(os.environ[OUT_DIR_ENV]) / "workload.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(wl, out)
    log.info("wrote %s", out)
    return 0


def cmd_run(args) -> int:
    wl = _workload(args)
    config = _config(args, args.strategy)
    backend = FileSystemBackend(args.write_dir) if args.write_dir else None
    result = run(wl, config, backend)
    manifest = config.manifest(wl)
    if args.format == "csv":
        _emit(args, _row(config.strategy.name, result.metrics, manifest), "run")
        return 0
    payload = {
        "manifest": manifest,
        "manifest_hash": manifest_hash(manifest),
        "metrics": result.metrics.to_dict(),
    }
    if args.flushes:
        payload["flushes"] = result.to_dict()["flushes"]
    _emit(args, payload, "run")
    return 0


def cmd_sweep(args) -> int:
    raw = (args.values or SWEEP_DEFAULTS[args.axis]).split(",")
    values = [v.strip() for v in raw if v.strip()]
    if not values:
        raise ValueError("sweep needs at least one value")
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    rows = []
    for value in values:
        wl_over: dict = {}
        cfg_over: dict = {}
        if args.axis == "sigma":
            wl_over["size_dist"] = LogNormalParams(args.mu, float(value))
        elif args.axis == "bmin":
            cfg_over["bmin"] = int(value)
        elif args.axis == "storage":
            cfg_over["storage"] = value
        elif args.axis == "scale":
            millions = float(value)
            wl_over["total_texts"] = int(millions * 1_000_000)
            wl_over["P"] = max(1, round(args.p * millions * 1_000_000 / args.n))
            wl_over["text_mode"] = "metered" if millions > 1 else args.text_mode
        elif args.axis == "model_preset":
            cfg_over["preset"] = value
        wl = _workload(args, **wl_over)
        for strategy in strategies:
            config = _config(args, strategy, **dict(cfg_over))
            result = run(wl, config)
            row = {args.axis: value, **_row(config.strategy.name, result.metrics, config.manifest(wl))}
            rows.append(row)
            log.info("%s=%s %s: %.0f t/s", args.axis, value, strategy, result.metrics.throughput)
    _emit(args, rows, f"sweep-{args.axis}")
    return 0


def cmd_predict(args) -> int:
    p = get_preset(args.preset)
    F = args.f if args.f is not None else min(args.p, flush_count(args.n, args.bmin))
    pred = predict_speedup(args.n, args.p, F, p)
    _emit(
        args,
        {
            "preset": args.preset,
            "N": args.n,
            "P": args.p,
            "F": pred.F,
            "alpha": pred.alpha,
            "speedup": pred.speedup,
            "t_pbp": pred.t_pbp,
            "t_batched": pred.t_batched,
            "throughput_pbp": pred.throughput_pbp,
            "throughput_batched": pred.throughput_batched,
            "n_star": ipc_threshold(p),
        },
        "predict",
    )
    return 0


def cmd_decide(args) -> int:
    phi, cv = args.phi, args.cv
    if phi is None or cv is None:
        wl = _workload(args, text_mode="metered")
        if phi is None:
            phi = ipc_fraction(wl, get_preset(args.preset))
        if cv is None:
            cv = size_stats(wl).cv
    rec = recommend(phi, cv)
    _emit(args, {"phi": rec.phi, "cv": rec.cv, "verdict": rec.verdict.value}, "decide")
    return 0


def cmd_microbench(args) -> int:
    rows = [time_serializers(int(n), args.d, args.repeat) for n in args.rows.split(",") if n.strip()]
    _emit(args, rows, "microbench-serializer")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "predict": cmd_predict,
    "decide": cmd_decide,
    "microbench-serializer": cmd_microbench,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UploadFailedError as exc:
        log.error("%s", exc)
        return 3
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
