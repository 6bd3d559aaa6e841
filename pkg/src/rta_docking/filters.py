"""Run time assurance filters.

Two monitoring styles (explicit constraint checks or backup rollouts) times two
intervention styles (switch to backup, or minimally modify the command with a
barrier QP), plus a passthrough baseline and a latching wrapper.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from rta_docking import kernels
from rta_docking.controllers import (
    IDLE_TRACKER,
    BackupTrackerState,
    LqrGains,
    backup_control_explicit,
    backup_control_lqr,
    engage_tracker,
)
from rta_docking.dynamics import CwParameters, cw_matrices, free_flow_matrix, step_euler
from rta_docking.nmt import NmtLibrary
from rta_docking.qp import QpProblem, QpSolver
from rta_docking.safety import (
    NUM_CONSTRAINTS,
    SafetyParameters,
    constraint_gradients_batch,
    constraint_values,
    constraint_values_batch,
)

PASSTHROUGH = "passthrough"
SWITCHED = "switched-to-backup"
QP_MODIFIED = "qp-modified"
QP_FALLBACK = "qp-infeasible-fallback"
MECHANISMS = (PASSTHROUGH, SWITCHED, QP_MODIFIED, QP_FALLBACK)

# below this change the QP output is treated as an unmodified command
PASSTHROUGH_TOL = 1e-9


class FilterKind(str, enum.Enum):
    NONE = "none"
    EXPLICIT_SWITCHING = "explicit-switching"
    IMPLICIT_SWITCHING = "implicit-switching"
    EXPLICIT_OPTIMIZATION = "explicit-optimization"
    IMPLICIT_OPTIMIZATION = "implicit-optimization"

    @classmethod
    def parse(cls, value) -> "FilterKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for kind in cls:
            if key in (kind.value, kind.name.lower().replace("_", "-"), kind.short.lower()):
                return kind
        raise ValueError(f"unknown filter kind {value!r}; choose from {[k.value for k in cls]}")

    @property
    def short(self) -> str:
        return {"none": "none", "explicit-switching": "ES", "implicit-switching": "IS",
                "explicit-optimization": "EO", "implicit-optimization": "IO"}[self.value]


RTA_KINDS = (FilterKind.EXPLICIT_SWITCHING, FilterKind.EXPLICIT_OPTIMIZATION,
             FilterKind.IMPLICIT_SWITCHING, FilterKind.IMPLICIT_OPTIMIZATION)


@dataclass(frozen=True)
class BackupHorizon:
    """Uniform sample times ``0, dt, ..., T`` along a backup rollout (both ends included)."""

    T: float = 5.0
    dt: float = 1.0

    def __post_init__(self):
        if self.dt <= 0 or self.T < 0:
            raise ValueError("horizon needs dt > 0 and T >= 0")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"T={self.T} is not a whole number of dt={self.dt} steps")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def num_samples(self) -> int:
        return self.steps + 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.num_samples)


@dataclass(frozen=True, eq=False)
class FilterDecision:
    u_act: np.ndarray
    intervened: bool
    mechanism: str
    latency: float = 0.0
    qp_status: Optional[str] = None
    qp_iterations: int = 0
    barrier_active: bool = False
    max_multiplier: float = 0.0


@dataclass(eq=False)
class FilterDeps:
    """Everything a filter needs besides the state and the desired command."""

    params: CwParameters
    sp: SafetyParameters
    library: NmtLibrary
    backup_gains: LqrGains
    dt: float = 1.0
    horizon: BackupHorizon = field(default_factory=BackupHorizon)
    handover_eps: float = 50.0
    qp_max_iter: int = 100
    backend: Optional[str] = None
    implicit_form: str = "flow"
    track_before_handover: bool = False
    A: np.ndarray = field(init=False)
    B: np.ndarray = field(init=False)
    flow: np.ndarray = field(init=False)

    def __post_init__(self):
        self.A, self.B = cw_matrices(self.params)
        self.flow = free_flow_matrix(self.params, self.dt)
        self.kernels = kernels.get_backend(self.backend)


class Rollout(NamedTuple):
    states: np.ndarray      # (J+1, 6)
    controls: np.ndarray    # (J+1, 3), backup command at each sample
    sens: Optional[np.ndarray]  # (J+1, 6, 6) or None
    saturated: np.ndarray   # (J+1, 3) bool


def backup_rollout(state, deps: FilterDeps, horizon: Optional[BackupHorizon] = None,
                   tracker: BackupTrackerState = IDLE_TRACKER, want_sens: bool = False) -> Rollout:
    """Roll the NMT-tracking backup forward from ``state`` over ``horizon``.

    An idle tracker is engaged on the closest library target first.
    """
    hz = deps.horizon if horizon is None else horizon
    x = np.asarray(state, dtype=float)
    if not tracker.engaged:
        tracker = engage_tracker(x, deps.library)
    # the kernel moves the target whenever its handover flag is set
    moving = tracker.handover or deps.track_before_handover
    out = deps.kernels.backup_rollout(
        x, tracker.target, moving, deps.backup_gains.K, deps.A, deps.B, deps.flow,
        deps.params.u_max, deps.handover_eps, hz.dt, hz.steps, want_sens)
    return Rollout(*out)


def propagate_sensitivity(state, horizon: BackupHorizon, deps: FilterDeps,
                          tracker: BackupTrackerState = IDLE_TRACKER) -> Rollout:
    """Backup trajectory samples with the flow sensitivity ``D_j`` at each one.

    ``D_{j+1} = (I + dt (A - B K_s)) D_j`` where ``K_s`` zeroes the gain rows of
    saturated axes, since the command is locally constant there.
    """
    return backup_rollout(state, deps, horizon, tracker, want_sens=True)


def build_explicit_barriers(state, sp: SafetyParameters, params: CwParameters,
                            A: Optional[np.ndarray] = None, B: Optional[np.ndarray] = None):
    """Barrier rows ``G u + h >= 0`` enforcing the constraint derivatives at ``state``.

    Row ``i`` is ``grad_i(x) (A x + B u) + lambda_i (phi_i(x) - margin) >= 0``.
    Returns ``(G (4, 3), h (4,))``.
    """
    if A is None or B is None:
        A, B = cw_matrices(params)
    x = np.asarray(state, dtype=float)
    r = x[0:3]
    v = x[3:6]
    rn = np.sqrt(r @ r)
    vn = np.sqrt(v @ v)
    grads = np.zeros((NUM_CONSTRAINTS, 6))
    grads[0, 0:3] = sp.nu1 * r / max(rn, sp.grad_epsilon)
    grads[0, 3:6] = -v / max(vn, sp.grad_epsilon)
    grads[1, 3] = -2.0 * v[0]
    grads[2, 4] = -2.0 * v[1]
    grads[3, 5] = -2.0 * v[2]
    values = np.empty(NUM_CONSTRAINTS)
    values[0] = sp.nu0 + sp.nu1 * rn - vn
    values[1:] = sp.v_max * sp.v_max - v * v
    G = grads @ B
    h = grads @ (A @ x) + np.asarray(sp.alpha_gains) * (values - sp.barrier_margin)
    return G, h


IMPLICIT_FORMS = ("flow", "anchored")


def build_implicit_barriers(state, rollout: Rollout, sp: SafetyParameters, params: CwParameters,
                            A: Optional[np.ndarray] = None, B: Optional[np.ndarray] = None,
                            form: str = "flow"):
    """Barrier rows anchored at every backup sample ``x_j``, four per sample, sample-major.

    ``form="flow"`` differentiates ``phi_i`` at ``x_j`` along the current motion::

        grad_i(x_j) D_j (A x + B u) + lambda_i (phi_i(x_j) - margin) >= 0

    ``form="anchored"`` subtracts the backup vector field at the sample::

        grad_i(x_j) D_j [A x + B u - A x_j - B u_b(x_j)] + lambda_i (phi_i(x_j) - margin) >= 0

    Returns ``(G (4(J+1), 3), h (4(J+1),))``.
    """
    if rollout.sens is None:
        raise ValueError("rollout has no sensitivity matrices")
    if form not in IMPLICIT_FORMS:
        raise ValueError(f"form must be one of {IMPLICIT_FORMS}, got {form!r}")
    if A is None or B is None:
        A, B = cw_matrices(params)
    x = np.asarray(state, dtype=float)
    X, D = rollout.states, rollout.sens
    grads = constraint_gradients_batch(X, sp)                 # (J+1, 4, 6)
    values = constraint_values_batch(X, sp)                   # (J+1, 4)
    gD = np.einsum("jik,jkl->jil", grads, D)                  # (J+1, 4, 6)
    if form == "flow":
        drift = np.broadcast_to(A @ x, X.shape)
    else:
        drift = (A @ x)[None, :] - X @ A.T - rollout.controls @ B.T
    G = gD @ B                                                # (J+1, 4, 3)
    h = (np.einsum("jil,jl->ji", gD, drift)
         + np.asarray(sp.alpha_gains)[None, :] * (values - sp.barrier_margin))
    return G.reshape(-1, 3), h.reshape(-1)


class RtaFilter:
    """Base class. Call with ``(state, u_des)`` to get a :class:`FilterDecision`.

    Each instance keeps its own scratch (tracker, QP warm start) and serves one run.
    """

    kind = FilterKind.NONE

    def __init__(self, deps: FilterDeps):
        self.deps = deps

    def reset(self):
        pass

    def __call__(self, state, u_des) -> FilterDecision:
        x = np.asarray(state, dtype=float)
        u = np.asarray(u_des, dtype=float)
        t0 = time.perf_counter()
        decision = self._filter(x, u)
        latency = time.perf_counter() - t0
        return _with_latency(decision, latency)

    def _filter(self, state, u_des) -> FilterDecision:
        return FilterDecision(u_des, False, PASSTHROUGH)


def _with_latency(decision: FilterDecision, latency: float) -> FilterDecision:
    object.__setattr__(decision, "latency", latency)
    return decision


class PassthroughFilter(RtaFilter):
    """No RTA: the desired command always goes through."""


class _TrackerMixin:
    """Live NMT-tracking backup; the engagement persists while the backup keeps authority."""

    def _init_tracker(self):
        self.tracker = IDLE_TRACKER

    def _backup(self, state) -> np.ndarray:
        d = self.deps
        u, self.tracker = backup_control_lqr(state, self.tracker, d.library, d.backup_gains,
                                             d.params, d.handover_eps, d.flow, d.track_before_handover)
        return u

    def _release(self):
        self.tracker = IDLE_TRACKER


class ExplicitSwitchingFilter(RtaFilter):
    kind = FilterKind.EXPLICIT_SWITCHING

    def _filter(self, state, u_des):
        d = self.deps
        nxt = step_euler(state, u_des, d.params, d.dt)
        if constraint_values(nxt, d.sp).allowable:
            return FilterDecision(u_des, False, PASSTHROUGH)
        return FilterDecision(backup_control_explicit(state, d.sp, d.params, d.dt), True, SWITCHED)


class ImplicitSwitchingFilter(_TrackerMixin, RtaFilter):
    kind = FilterKind.IMPLICIT_SWITCHING

    def __init__(self, deps: FilterDeps):
        super().__init__(deps)
        self._init_tracker()

    def reset(self):
        self._init_tracker()

    def _filter(self, state, u_des):
        d = self.deps
        nxt = step_euler(state, u_des, d.params, d.dt)
        if constraint_values(nxt, d.sp).allowable:
            roll = backup_rollout(nxt, d)
            if np.min(constraint_values_batch(roll.states, d.sp)) >= 0.0:
                self._release()
                return FilterDecision(u_des, False, PASSTHROUGH)
        return FilterDecision(self._backup(state), True, SWITCHED)


class _OptimizationFilter(RtaFilter):
    def __init__(self, deps: FilterDeps):
        super().__init__(deps)
        self.solver = QpSolver(deps.qp_max_iter, warm_start=True, backend=deps.backend)

    def reset(self):
        self.solver.reset()

    def _rows(self, state):
        raise NotImplementedError

    def _fallback(self, state) -> np.ndarray:
        raise NotImplementedError

    def _filter(self, state, u_des):
        d = self.deps
        G, h = self._rows(state)
        u_max = d.params.u_max
        sol = self.solver.solve(QpProblem(u_des, G, h, -u_max * np.ones(3), u_max * np.ones(3)))
        k = G.shape[0]
        if not sol.optimal:
            return FilterDecision(self._fallback(state), True, QP_FALLBACK, qp_status=sol.status,
                                  qp_iterations=sol.iterations)
        self._qp_ok()
        active = sol.barrier_active(k)
        peak = float(np.max(sol.multipliers[:k])) if k else 0.0
        if np.max(np.abs(sol.u_act - u_des)) <= PASSTHROUGH_TOL:
            return FilterDecision(u_des, False, PASSTHROUGH, qp_status=sol.status,
                                  qp_iterations=sol.iterations, barrier_active=active, max_multiplier=peak)
        return FilterDecision(sol.u_act, True, QP_MODIFIED, qp_status=sol.status,
                              qp_iterations=sol.iterations, barrier_active=active, max_multiplier=peak)

    def _qp_ok(self):
        pass


class ExplicitOptimizationFilter(_OptimizationFilter):
    kind = FilterKind.EXPLICIT_OPTIMIZATION

    def _rows(self, state):
        d = self.deps
        return build_explicit_barriers(state, d.sp, d.params, d.A, d.B)

    def _fallback(self, state):
        d = self.deps
        return backup_control_explicit(state, d.sp, d.params, d.dt)


class ImplicitOptimizationFilter(_TrackerMixin, _OptimizationFilter):
    kind = FilterKind.IMPLICIT_OPTIMIZATION

    def __init__(self, deps: FilterDeps):
        super().__init__(deps)
        self._init_tracker()

    def reset(self):
        super().reset()
        self._init_tracker()

    def _rows(self, state):
        d = self.deps
        roll = propagate_sensitivity(state, d.horizon, d)
        return build_implicit_barriers(state, roll, d.sp, d.params, d.A, d.B, d.implicit_form)

    def _fallback(self, state):
        return self._backup(state)

    def _qp_ok(self):
        self._release()


_FILTERS = {
    FilterKind.NONE: PassthroughFilter,
    FilterKind.EXPLICIT_SWITCHING: ExplicitSwitchingFilter,
    FilterKind.IMPLICIT_SWITCHING: ImplicitSwitchingFilter,
    FilterKind.EXPLICIT_OPTIMIZATION: ExplicitOptimizationFilter,
    FilterKind.IMPLICIT_OPTIMIZATION: ImplicitOptimizationFilter,
}


def make_filter(kind, deps: FilterDeps) -> RtaFilter:
    return _FILTERS[FilterKind.parse(kind)](deps)


def default_release(margin: float = 0.0) -> Callable:
    """Release once the backup has handed over to its NMT and every constraint has ``margin``."""

    def release(state, tracker: BackupTrackerState, deps: FilterDeps) -> bool:
        if not (tracker.engaged and tracker.handover):
            return False
        return min(constraint_values(state, deps.sp)) >= margin

    return release


class LatchingFilter(_TrackerMixin, RtaFilter):
    """Wraps a filter and, once triggered, hands authority to the backup until release.

    The trigger fires on :meth:`latch`, at ``trigger_step`` (counted in calls), or
    after ``fallback_limit`` consecutive QP fallbacks from the inner filter.
    """

    def __init__(self, inner: RtaFilter, trigger_step: Optional[int] = None, fallback_limit: int = 3,
                 release: Optional[Callable] = None):
        super().__init__(inner.deps)
        self.inner = inner
        self.kind = inner.kind
        self.trigger_step = trigger_step
        self.fallback_limit = fallback_limit
        self.release = release if release is not None else default_release()
        self.reset()

    def reset(self):
        self.inner.reset()
        self._init_tracker()
        self.latched = False
        self.calls = 0
        self.consecutive_fallbacks = 0
        self.latch_count = 0
        self.release_count = 0

    def latch(self):
        if not self.latched:
            self.latched = True
            self.latch_count += 1
            self._init_tracker()

    def _filter(self, state, u_des):
        step = self.calls
        self.calls += 1
        if self.trigger_step is not None and step == self.trigger_step:
            self.latch()
        if self.latched and self.tracker.engaged and self.release(state, self.tracker, self.deps):
            self.latched = False
            self.release_count += 1
            self._release()
            self.inner.reset()
        if self.latched:
            return FilterDecision(self._backup(state), True, SWITCHED)
        decision = self.inner._filter(state, u_des)
        if decision.mechanism == QP_FALLBACK:
            self.consecutive_fallbacks += 1
            if self.consecutive_fallbacks >= self.fallback_limit:
                self.consecutive_fallbacks = 0
                self.latch()
        else:
            self.consecutive_fallbacks = 0
        return decision
