"""Compare the compiled kernels with the pure-Python fallback.

Times the two hot kernels (the box-and-barrier QP projection and the backup
rollout with sensitivities) on workloads shaped like the filters' own, then
one short closed-loop run per filter on each backend.

    python benchmarks/bench_backends.py [--repeat 2000] [--steps 300] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from rta_docking import kernels
from rta_docking.controllers import engage_tracker
from rta_docking.filters import RTA_KINDS
from rta_docking.sim import build_scenario, default_config, run_scenario


def qp_workload(rng, rows: int, count: int = 64):
    """Random barrier QPs with a feasible interior, as the filters produce them."""
    out = []
    for _ in range(count):
        G = rng.normal(size=(rows, 3))
        anchor = rng.uniform(-0.5, 0.5, 3)
        h = -G @ anchor + rng.uniform(0.0, 0.3, rows)
        out.append((rng.uniform(-1.5, 1.5, 3), G, h, -np.ones(3), np.ones(3)))
    return out


def time_qp(backend: str, problems, repeat: int) -> float:
    mod = kernels.get_backend(backend)
    calls = [p + ((), 100) for p in problems]

    def run():
        for args in calls:
            mod.qp_project(*args)

    return min(timeit.repeat(run, number=max(1, repeat // len(calls)), repeat=3)) / (
        max(1, repeat // len(calls)) * len(calls))


def time_rollout(backend: str, deps, states, steps: int, repeat: int) -> float:
    mod = kernels.get_backend(backend)
    targets = [engage_tracker(x, deps.library).target for x in states]
    K = deps.backup_gains.K

    def run():
        for x, t in zip(states, targets):
            mod.backup_rollout(x, t, False, K, deps.A, deps.B, deps.flow, deps.params.u_max,
                               deps.handover_eps, 1.0, steps, True)

    n = max(1, repeat // len(states))
    return min(timeit.repeat(run, number=n, repeat=3)) / (n * len(states))


def time_filters(backend: str, steps: int) -> dict:
    cfg = default_config().replace(duration=steps, stop_on_dock=False)
    sc = build_scenario(cfg, backend=backend)
    return {kind.short: run_scenario(cfg.replace(filter=kind), sc).summary["mean_latency"] for kind in RTA_KINDS}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000, help="kernel calls per timing sample")
    ap.add_argument("--steps", type=int, default=300, help="closed-loop steps per filter")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels are not built; only the Python fallback is timed")
    rng = np.random.default_rng(args.seed)
    deps = build_scenario(default_config()).deps
    states = [np.array(default_config().initial_state) + np.r_[rng.normal(0, 500, 3), rng.normal(0, 0.3, 3)]
              for _ in range(16)]
    workloads = {
        "qp, 4 barrier rows": ("qp", qp_workload(rng, 4)),
        "qp, 24 barrier rows": ("qp", qp_workload(rng, 24)),
        "rollout T=5 with sensitivities": ("rollout", 5),
        "rollout T=50 with sensitivities": ("rollout", 50),
    }
    results: dict = {"kernels": {}, "filters": {}}
    for name, (kind, workload) in workloads.items():
        row = {}
        for be in backends:
            if kind == "qp":
                row[be] = time_qp(be, workload, args.repeat)
            else:
                row[be] = time_rollout(be, deps, states, workload, args.repeat // 10)
        results["kernels"][name] = row
    for be in backends:
        results["filters"][be] = time_filters(be, args.steps)

    print(f"{'kernel':34s}" + "".join(f"{be:>14s}" for be in backends) + "    speedup")
    for name, row in results["kernels"].items():
        speed = row["python"] / row["compiled"] if "compiled" in row else float("nan")
        print(f"{name:34s}" + "".join(f"{row[be] * 1e6:11.2f} us" for be in backends) + f"  {speed:8.1f}x")
    print(f"\n{'filter mean latency':34s}" + "".join(f"{be:>14s}" for be in backends) + "    speedup")
    for kind in results["filters"][backends[0]]:
        vals = [results["filters"][be][kind] for be in backends]
        speed = (results["filters"]["python"][kind] / results["filters"]["compiled"][kind]
                 if "compiled" in backends else float("nan"))
        print(f"{kind:34s}" + "".join(f"{v * 1e6:11.2f} us" for v in vals) + f"  {speed:8.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
