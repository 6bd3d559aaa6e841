"""Scenario configuration, the simulation loop, benchmarks and plot data."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from rta_docking.controllers import LqrGains, lqr_weights, primary_control, solve_lqr
from rta_docking.dynamics import CwParameters, cw_matrices, step_euler
from rta_docking.filters import (
    RTA_KINDS,
    BackupHorizon,
    FilterDecision,
    FilterDeps,
    FilterKind,
    RtaFilter,
    make_filter,
)
from rta_docking.nmt import NmtGridSpec, build_library
from rta_docking.safety import (
    SafetyParameters,
    check_lemma1,
    check_lemma2_box,
    constraint_values,
    lemma1_unit_discrepancy,
)

log = logging.getLogger(__name__)

BLOWUP_LIMIT = 1e9
# switching filters may sit on the boundary to within this much (units of each phi)
SWITCHING_TOLERANCE = 1e-3


class ConfigError(ValueError):
    """Scenario configuration is malformed or fails validation."""


class NumericBlowup(ArithmeticError):
    """A state component left the representable range; ``last_record`` holds the final step."""

    def __init__(self, message: str, last_record=None, records=None):
        super().__init__(message)
        self.last_record = last_record
        self.records = records or []


class IoFailure(OSError):
    """Writing an output artifact failed; the message names the path."""


@dataclass(frozen=True)
class LqrWeights:
    position: float
    velocity: float
    control: float

    def matrices(self):
        return lqr_weights(self.position, self.velocity, self.control)


def _default_initial_state() -> tuple[float, ...]:
    s = 9850.0 / math.sqrt(2.0)
    return (-s, -s, 0.0, 0.5, 0.5, 0.5)


@dataclass(frozen=True)
class ScenarioConfig:
    """One docking scenario.

    ``seed`` only drives the small initial-position jitter used to decorrelate
    benchmark repetitions; single runs are deterministic without it.
    """

    cw: CwParameters = field(default_factory=CwParameters)
    safety: SafetyParameters = field(default_factory=SafetyParameters)
    initial_state: tuple[float, ...] = field(default_factory=_default_initial_state)
    filter: FilterKind = FilterKind.EXPLICIT_SWITCHING
    duration: int = 6000
    dt: float = 1.0
    horizon: float = 5.0
    nmt_grid: NmtGridSpec = field(default_factory=NmtGridSpec)
    primary_weights: LqrWeights = LqrWeights(1e-4, 1e-1, 1.0)
    backup_weights: LqrWeights = LqrWeights(1e-4, 1e2, 1e2)
    handover_eps: float = 50.0
    implicit_form: str = "flow"
    track_before_handover: bool = False
    qp_max_iter: int = 100
    stop_on_dock: bool = True
    allow_unsafe_start: bool = False
    seed: int = 0
    bench_jitter: float = 1.0
    output_dir: Optional[str] = None
    write_ndjson: bool = False

    def validate(self) -> "ScenarioConfig":
        if len(self.initial_state) != 6 or not all(math.isfinite(v) for v in self.initial_state):
            raise ConfigError("initial_state needs six finite numbers")
        if self.duration < 0:
            raise ConfigError("duration must be >= 0")
        if self.dt <= 0:
            raise ConfigError("dt must be > 0")
        try:
            BackupHorizon(self.horizon, self.dt)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.handover_eps <= 0:
            raise ConfigError("handover_eps must be > 0")
        if self.implicit_form not in ("flow", "anchored"):
            raise ConfigError(f"implicit_form must be 'flow' or 'anchored', got {self.implicit_form!r}")
        if self.qp_max_iter < 1:
            raise ConfigError("qp_max_iter must be >= 1")
        if not self.allow_unsafe_start and not constraint_values(self.initial_state, self.safety).allowable:
            raise ConfigError("initial state violates a safety constraint (use allow_unsafe_start to override)")
        return self

    def replace(self, **changes) -> "ScenarioConfig":
        if "filter" in changes:
            changes["filter"] = FilterKind.parse(changes["filter"])
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "cw": dataclasses.asdict(self.cw),
            "safety": {**dataclasses.asdict(self.safety), "alpha_gains": list(self.safety.alpha_gains)},
            "initial_state": list(self.initial_state),
            "filter": self.filter.value,
            "duration": self.duration,
            "dt": self.dt,
            "horizon": self.horizon,
            "nmt_grid": {k: list(v) if isinstance(v, tuple) else v
                         for k, v in dataclasses.asdict(self.nmt_grid).items()},
            "primary_weights": dataclasses.asdict(self.primary_weights),
            "backup_weights": dataclasses.asdict(self.backup_weights),
            "handover_eps": self.handover_eps,
            "implicit_form": self.implicit_form,
            "track_before_handover": self.track_before_handover,
            "qp_max_iter": self.qp_max_iter,
            "stop_on_dock": self.stop_on_dock,
            "allow_unsafe_start": self.allow_unsafe_start,
            "seed": self.seed,
            "bench_jitter": self.bench_jitter,
            "output_dir": self.output_dir,
            "write_ndjson": self.write_ndjson,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(data)
        try:
            if "cw" in kw:
                kw["cw"] = CwParameters(**kw["cw"])
            if "safety" in kw:
                safety = dict(kw["safety"])
                if "alpha_gains" in safety:
                    safety["alpha_gains"] = tuple(safety["alpha_gains"])
                kw["safety"] = SafetyParameters(**safety)
            if "nmt_grid" in kw:
                grid = {k: tuple(v) if isinstance(v, list) else v for k, v in kw["nmt_grid"].items()}
                kw["nmt_grid"] = NmtGridSpec(**grid)
            for key in ("primary_weights", "backup_weights"):
                if key in kw:
                    kw[key] = LqrWeights(**kw[key])
            if "initial_state" in kw:
                kw["initial_state"] = tuple(float(v) for v in kw["initial_state"])
            if "filter" in kw:
                kw["filter"] = FilterKind.parse(kw["filter"])
            cfg = cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg


def default_config() -> ScenarioConfig:
    return ScenarioConfig()


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return ScenarioConfig.from_dict(data)


def save_config(config: ScenarioConfig, path) -> None:
    _write_text(path, json.dumps(config.to_dict(), indent=2) + "\n")


def check_parameters(config: ScenarioConfig) -> dict:
    """Evaluate the two parameter lemmas and any unit-discrepancy warning."""
    rhs, ok1 = check_lemma1(config.cw, config.safety)
    box = check_lemma2_box(config.cw, config.safety)
    return {
        "lemma1_rhs": float(rhs),
        "lemma1_satisfied": bool(ok1),
        "lemma2_box": {"x": bool(box.x_axis), "y": bool(box.y_axis), "z": bool(box.z_axis),
                       "margins": [float(m) for m in box.margins], "satisfied": bool(box.all)},
        "warning": lemma1_unit_discrepancy(config.cw, config.safety),
    }


_GAIN_CACHE: dict = {}


def _gains(params: CwParameters, weights: LqrWeights, dt: float) -> LqrGains:
    key = (params, weights, dt)
    if key not in _GAIN_CACHE:
        A, B = cw_matrices(params)
        _GAIN_CACHE[key] = solve_lqr(A, B, *weights.matrices(), dt)
    return _GAIN_CACHE[key]


@dataclass(eq=False)
class Scenario:
    """Config plus everything derived from it (gains, NMT library, filter deps)."""

    config: ScenarioConfig
    primary: LqrGains
    deps: FilterDeps

    def make_filter(self, kind=None) -> RtaFilter:
        return make_filter(self.config.filter if kind is None else kind, self.deps)


def build_scenario(config: ScenarioConfig, backend: Optional[str] = None) -> Scenario:
    config.validate()
    cw, sp = config.cw, config.safety
    lib = build_library(config.nmt_grid, sp, cw)
    deps = FilterDeps(cw, sp, lib, _gains(cw, config.backup_weights, config.dt), dt=config.dt,
                      horizon=BackupHorizon(config.horizon, config.dt),
                      handover_eps=config.handover_eps, qp_max_iter=config.qp_max_iter,
                      backend=backend, implicit_form=config.implicit_form,
                      track_before_handover=config.track_before_handover)
    return Scenario(config, _gains(cw, config.primary_weights, config.dt), deps)


@dataclass(frozen=True, eq=False)
class StepRecord:
    step: int
    time: float
    state: np.ndarray
    u_des: np.ndarray
    u_act: np.ndarray
    intervened: bool
    mechanism: str
    latency: float
    qp_status: Optional[str]
    barrier_active: bool
    phi: tuple[float, float, float, float]
    r_norm: float
    v_norm: float

    def same_trajectory(self, other: "StepRecord") -> bool:
        """Bitwise equality of everything except timing."""
        return (self.step == other.step and self.time == other.time
                and np.array_equal(self.state, other.state) and np.array_equal(self.u_des, other.u_des)
                and np.array_equal(self.u_act, other.u_act) and self.intervened == other.intervened
                and self.mechanism == other.mechanism and self.phi == other.phi)


CSV_COLUMNS = (
    ["step", "time", "x", "y", "z", "vx", "vy", "vz",
     "ux_des", "uy_des", "uz_des", "ux_act", "uy_act", "uz_act",
     "intervened", "mechanism", "latency", "qp_status", "barrier_active",
     "phi1", "phi2", "phi3", "phi4", "r_norm", "v_norm"]
)


def _record_row(rec: StepRecord) -> list:
    return ([rec.step, repr(rec.time)] + [repr(float(v)) for v in rec.state]
            + [repr(float(v)) for v in rec.u_des] + [repr(float(v)) for v in rec.u_act]
            + [int(rec.intervened), rec.mechanism, repr(rec.latency), rec.qp_status or "",
               int(rec.barrier_active)]
            + [repr(float(v)) for v in rec.phi] + [repr(rec.r_norm), repr(rec.v_norm)])


def _record_json(rec: StepRecord) -> dict:
    return {
        "step": rec.step, "time": rec.time, "state": rec.state.tolist(),
        "u_des": rec.u_des.tolist(), "u_act": rec.u_act.tolist(),
        "intervened": rec.intervened, "mechanism": rec.mechanism, "latency": rec.latency,
        "qp_status": rec.qp_status, "barrier_active": rec.barrier_active,
        "phi": list(rec.phi), "r_norm": rec.r_norm, "v_norm": rec.v_norm,
    }


@dataclass(eq=False)
class RunResult:
    records: list
    summary: dict


def _tolerance_ok(kind: FilterKind, min_phi) -> Optional[bool]:
    if kind == FilterKind.NONE:
        return None
    if kind in (FilterKind.EXPLICIT_SWITCHING, FilterKind.IMPLICIT_SWITCHING):
        return bool(min(min_phi) >= -SWITCHING_TOLERANCE)
    return bool(min(min_phi) > 0.0)


def _docked(state, sp: SafetyParameters) -> bool:
    return bool(np.linalg.norm(state[0:3]) < 1.0 and np.linalg.norm(state[3:6]) < sp.nu0)


def run_scenario(config: ScenarioConfig, scenario: Optional[Scenario] = None,
                 rta: Optional[RtaFilter] = None, stop_on_dock: Optional[bool] = None) -> RunResult:
    """Simulate one scenario with the configured filter.

    Each record holds the state at the start of its step together with the
    commands applied over that step. The summary's safety minimum also covers
    the terminal state.
    """
    sc = scenario if scenario is not None else build_scenario(config)
    cw, sp = config.cw, config.safety
    kind = FilterKind.parse(config.filter)
    rta = rta if rta is not None else sc.make_filter(kind)
    stop = config.stop_on_dock if stop_on_dock is None else stop_on_dock
    x = np.array(config.initial_state, dtype=float)
    records: list[StepRecord] = []
    min_phi = np.array(constraint_values(x, sp))
    first_violation = None if min_phi.min() >= 0 else 0
    docked_step = None
    for k in range(config.duration):
        phi = constraint_values(x, sp)
        u_des = primary_control(x, sc.primary, cw)
        d: FilterDecision = rta(x, u_des)
        rec = StepRecord(k, k * config.dt, x.copy(), u_des, np.array(d.u_act, dtype=float), d.intervened,
                         d.mechanism, d.latency, d.qp_status, d.barrier_active, tuple(phi),
                         float(np.linalg.norm(x[0:3])), float(np.linalg.norm(x[3:6])))
        records.append(rec)
        x = step_euler(x, d.u_act, cw, config.dt)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > BLOWUP_LIMIT:
            raise NumericBlowup(f"state left |x| <= {BLOWUP_LIMIT:g} after step {k}", rec, records)
        phi_next = np.array(constraint_values(x, sp))
        if first_violation is None and phi_next.min() < 0:
            first_violation = k + 1
        min_phi = np.minimum(min_phi, phi_next)
        if _docked(x, sp):
            if docked_step is None:
                docked_step = k + 1
            if stop:
                break
    summary = summarize(config, records, x, min_phi, first_violation, docked_step, kind)
    return RunResult(records, summary)


def count_transitions(records: Iterable[StepRecord]) -> int:
    """Number of passthrough <-> intervention changes between consecutive steps."""
    prev = None
    count = 0
    for rec in records:
        if prev is not None and rec.intervened != prev:
            count += 1
        prev = rec.intervened
    return count


def summarize(config, records, final_state, min_phi, first_violation, docked_step, kind) -> dict:
    mechanisms: dict[str, int] = {}
    for rec in records:
        mechanisms[rec.mechanism] = mechanisms.get(rec.mechanism, 0) + 1
    latencies = np.array([rec.latency for rec in records]) if records else np.zeros(0)
    return {
        "filter": kind.value,
        "steps": len(records),
        "initial_state": list(config.initial_state),
        "final_state": [float(v) for v in final_state],
        "docked": docked_step is not None,
        "docked_step": docked_step,
        "min_phi": [float(v) for v in min_phi],
        "violation": bool(min(min_phi) < 0),
        "first_violation_step": first_violation,
        "within_tolerance": _tolerance_ok(kind, min_phi),
        "transitions": count_transitions(records),
        "mechanisms": mechanisms,
        "mean_latency": float(latencies.mean()) if len(latencies) else 0.0,
    }


def _write_text(path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror}") from None


def write_records_csv(records, path) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for rec in records:
                w.writerow(_record_row(rec))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror}") from None


def write_records_ndjson(records, path) -> None:
    _write_text(path, "".join(json.dumps(_record_json(rec)) + "\n" for rec in records))


def read_records_csv(path) -> list[StepRecord]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc.strerror}") from None
    out = []
    for row in rows:
        f = lambda *keys: np.array([float(row[k]) for k in keys])  # noqa: E731
        out.append(StepRecord(
            int(row["step"]), float(row["time"]), f("x", "y", "z", "vx", "vy", "vz"),
            f("ux_des", "uy_des", "uz_des"), f("ux_act", "uy_act", "uz_act"),
            bool(int(row["intervened"])), row["mechanism"], float(row["latency"]),
            row["qp_status"] or None, bool(int(row["barrier_active"])),
            tuple(float(row[f"phi{i}"]) for i in range(1, 5)),
            float(row["r_norm"]), float(row["v_norm"])))
    return out


def write_run(result: RunResult, out_dir, ndjson: bool = False) -> dict:
    out = Path(out_dir)
    paths = {"records": str(out / "records.csv"), "summary": str(out / "summary.json")}
    write_records_csv(result.records, paths["records"])
    if ndjson:
        paths["ndjson"] = str(out / "records.ndjson")
        write_records_ndjson(result.records, paths["ndjson"])
    _write_text(paths["summary"], json.dumps(result.summary, indent=2) + "\n")
    return paths


def emit_plot_data(records, out_dir, sp: SafetyParameters = SafetyParameters()) -> dict:
    """Write one CSV per safety panel plus a JSON describing the safe regions.

    Panels: ``speed_limit.csv`` (|r| against |v| with the boundary speed at
    each |r|) and ``vx.csv``, ``vy.csv``, ``vz.csv`` (time against each velocity
    component with the +-v_max lines).
    """
    records = list(records)
    if not records:
        raise ValueError("no records to plot")
    out = Path(out_dir)
    paths = {}
    r = np.array([rec.r_norm for rec in records])
    v = np.array([rec.v_norm for rec in records])
    boundary = sp.nu0 + sp.nu1 * r
    paths["speed_limit"] = str(out / "speed_limit.csv")
    _write_csv(paths["speed_limit"], ["step", "time", "r_norm", "v_norm", "boundary_v"],
               [[rec.step, repr(rec.time), repr(a), repr(b), repr(c)]
                for rec, a, b, c in zip(records, r, v, boundary)])
    crossings = {"speed_limit": bool(np.any(v > boundary))}
    for axis, name in enumerate(("vx", "vy", "vz")):
        comp = np.array([rec.state[3 + axis] for rec in records])
        paths[name] = str(out / f"{name}.csv")
        _write_csv(paths[name], ["step", "time", name, "upper", "lower"],
                   [[rec.step, repr(rec.time), repr(c), repr(sp.v_max), repr(-sp.v_max)]
                    for rec, c in zip(records, comp)])
        crossings[name] = bool(np.any(np.abs(comp) > sp.v_max))
    meta = {
        "speed_limit": {"x": "r_norm", "y": "v_norm", "boundary": "v = nu0 + nu1 * r",
                        "nu0": sp.nu0, "nu1": sp.nu1, "safe": "below",
                        "r_range": [float(r.min()), float(r.max())]},
        "velocity": {"upper": sp.v_max, "lower": -sp.v_max, "safe": "between"},
        "crosses_boundary": crossings,
        "records": len(records),
    }
    paths["regions"] = str(out / "regions.json")
    _write_text(paths["regions"], json.dumps(meta, indent=2) + "\n")
    return paths


def _write_csv(path, header, rows) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc.strerror}") from None


@dataclass(eq=False)
class BenchmarkReport:
    runs: int
    steps: int
    mean: dict
    std: dict
    multiple: dict
    backend: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def ordering(self) -> list[str]:
        return sorted(self.mean, key=self.mean.get)


def run_benchmark(config: ScenarioConfig, runs: int, steps: Optional[int] = None,
                  kinds=RTA_KINDS, horizon: Optional[float] = None,
                  backend: Optional[str] = None, progress=None) -> BenchmarkReport:
    """Time each filter over ``runs`` fixed-length scenarios.

    Runs are interleaved across filters so slow drift in machine load hits all
    of them alike. Each run's initial position gets a Gaussian jitter of
    ``bench_jitter`` metres from ``seed``.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    cfg = config if horizon is None else config.replace(horizon=horizon)
    cfg = cfg.replace(stop_on_dock=False, duration=cfg.duration if steps is None else steps)
    sc = build_scenario(cfg, backend=backend)
    rng = np.random.default_rng(cfg.seed)
    per_run: dict[str, list[float]] = {FilterKind.parse(k).value: [] for k in kinds}
    base = np.array(cfg.initial_state)
    for i in range(runs):
        x0 = base.copy()
        x0[0:3] += cfg.bench_jitter * rng.standard_normal(3)
        run_cfg = cfg.replace(initial_state=tuple(x0), allow_unsafe_start=True)
        for kind in per_run:
            res = run_scenario(run_cfg.replace(filter=kind), sc)
            per_run[kind].append(res.summary["mean_latency"])
            if progress is not None:
                progress(i, kind, res.summary["mean_latency"])
    mean = {k: float(np.mean(v)) for k, v in per_run.items()}
    std = {k: float(np.std(v)) for k, v in per_run.items()}
    low = min(mean.values())
    multiple = {k: (1.0 if m == low else m / low) for k, m in mean.items()}
    return BenchmarkReport(runs, cfg.duration, mean, std, multiple, backend or _backend_name())


def _backend_name() -> str:
    from rta_docking import kernels
    return kernels.BACKEND
