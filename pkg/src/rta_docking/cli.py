"""Command line entry point.

``rta-docking {run,bench,check-params,emit-nmt-library,emit-gains,emit-plots}``
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from rta_docking.filters import FilterKind
from rta_docking.nmt import build_library
from rta_docking.sim import (
    ConfigError,
    IoFailure,
    NumericBlowup,
    build_scenario,
    check_parameters,
    default_config,
    emit_plot_data,
    load_config,
    read_records_csv,
    run_benchmark,
    run_scenario,
    write_records_csv,
    write_run,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNSAFE = 3
EXIT_BLOWUP = 4
EXIT_IO = 5

log = logging.getLogger("rta_docking")


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    changes = {}
    if getattr(args, "filter", None):
        changes["filter"] = args.filter
    if getattr(args, "duration", None) is not None:
        changes["duration"] = args.duration
    if getattr(args, "allow_unsafe_start", False):
        changes["allow_unsafe_start"] = True
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _config(args).validate()
    out = args.out or cfg.output_dir
    try:
        result = run_scenario(cfg)
    except NumericBlowup as exc:
        print(f"numeric blowup: {exc}", file=sys.stderr)
        if out and exc.records:
            write_records_csv(exc.records, Path(out) / "records.csv")
        return EXIT_BLOWUP
    s = result.summary
    if out:
        write_run(result, out, ndjson=args.ndjson or cfg.write_ndjson)
    print(json.dumps(s, indent=2))
    if s["violation"]:
        where = f"step {s['first_violation_step']}"
        print(f"{s['filter']}: safety violation recorded at {where}; min phi = {s['min_phi']}",
              file=sys.stderr)
    if s["within_tolerance"] is False:
        return EXIT_UNSAFE
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args).validate()

    def progress(i, kind, latency):
        log.info("run %d %s mean latency %.1f us", i, kind, latency * 1e6)

    report = run_benchmark(cfg, args.runs, steps=args.steps, horizon=args.horizon, backend=args.backend,
                           progress=progress)
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_check_params(args) -> int:
    cfg = _config(args)
    res = check_parameters(cfg)
    print(f"speed-limit bound RHS = {res['lemma1_rhs']:.4f}; u_max = {cfg.cw.u_max:g} N -> "
          f"{'satisfied' if res['lemma1_satisfied'] else 'NOT satisfied'} (literal comparison)")
    box = res["lemma2_box"]
    print(f"axis authority over state box: x={box['x']} y={box['y']} z={box['z']} -> "
          f"{'satisfied' if box['satisfied'] else 'NOT satisfied'}")
    if res["warning"]:
        print(f"WARNING: {res['warning']}")
    if args.json:
        print(json.dumps(res, indent=2))
    return EXIT_OK


def cmd_emit_nmt_library(args) -> int:
    cfg = _config(args)
    lib = build_library(cfg.nmt_grid, cfg.safety, cfg.cw)
    text = json.dumps(lib.to_dict(), indent=2) + "\n"
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {len(lib)} NMTs to {args.out}")
    return EXIT_OK


def cmd_emit_gains(args) -> int:
    cfg = _config(args).validate()
    sc = build_scenario(cfg)
    doc = {
        "dt": cfg.dt,
        "control_law": "u = sat(-K (x - x_ref))",
        "primary": {"weights": dataclasses.asdict(cfg.primary_weights), **sc.primary.to_dict()},
        "backup": {"weights": dataclasses.asdict(cfg.backup_weights), "handover_eps": cfg.handover_eps,
                   **sc.deps.backup_gains.to_dict()},
    }
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote primary and backup gains to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_emit_plots(args) -> int:
    cfg = _config(args)
    records = read_records_csv(args.records)
    if not records:
        print(f"{args.records}: no records", file=sys.stderr)
        return EXIT_CONFIG
    paths = emit_plot_data(records, args.out, cfg.safety)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def _filter_kind(text: str) -> FilterKind:
    try:
        return FilterKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rta-docking", description="Run time assurance filters for CW docking.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    kinds = ", ".join(k.value for k in FilterKind)

    run = sub.add_parser("run", help="simulate one scenario")
    run.add_argument("--config")
    run.add_argument("--filter", type=_filter_kind, help=f"{kinds} (or none/es/is/eo/io)")
    run.add_argument("--out", help="directory for records.csv and summary.json")
    run.add_argument("--duration", type=int)
    run.add_argument("--ndjson", action="store_true", help="also write records.ndjson")
    run.add_argument("--allow-unsafe-start", action="store_true")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="time the four filters")
    bench.add_argument("--config")
    bench.add_argument("--runs", type=int, default=100)
    bench.add_argument("--steps", type=int, help="fixed steps per run (default: config duration)")
    bench.add_argument("--horizon", type=float, help="backup horizon T in seconds")
    bench.add_argument("--backend", choices=["compiled", "python"])
    bench.add_argument("--seed", type=int)
    bench.add_argument("--out")
    bench.set_defaults(func=cmd_bench)

    chk = sub.add_parser("check-params", help="evaluate the parameter conditions")
    chk.add_argument("--config")
    chk.add_argument("--json", action="store_true")
    chk.set_defaults(func=cmd_check_params)

    lib = sub.add_parser("emit-nmt-library", help="write the admissible NMT library as JSON")
    lib.add_argument("--config")
    lib.add_argument("--out", required=True)
    lib.set_defaults(func=cmd_emit_nmt_library)

    gains = sub.add_parser("emit-gains", help="write the synthesized LQR gain matrices as JSON")
    gains.add_argument("--config")
    gains.add_argument("--out", help="output file (default: stdout)")
    gains.set_defaults(func=cmd_emit_gains)

    plots = sub.add_parser("emit-plots", help="write plot-panel CSVs from a records CSV")
    plots.add_argument("--config")
    plots.add_argument("--records", required=True)
    plots.add_argument("--out", required=True)
    plots.set_defaults(func=cmd_emit_plots)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
