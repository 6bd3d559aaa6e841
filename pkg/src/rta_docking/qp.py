"""Dense projection QP used by the optimization filters.

    minimize    ||u_des - u||^2
    subject to  G u + h >= 0,  lower <= u <= upper

Solved by a primal active-set method (identity Hessian) with a phase-1
min-max-violation pass for the starting point.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from rta_docking import kernels

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max-iterations"
_STATUS_NAMES = {
    kernels.STATUS_OPTIMAL: OPTIMAL,
    kernels.STATUS_INFEASIBLE: INFEASIBLE,
    kernels.STATUS_MAX_ITER: MAX_ITERATIONS,
}


@dataclass(frozen=True, eq=False)
class QpProblem:
    u_des: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u_des, dtype=float).reshape(3)
        G = np.asarray(self.G, dtype=float).reshape(-1, 3)
        h = np.asarray(self.h, dtype=float).reshape(-1)
        lo = np.empty(3)
        lo[:] = self.lower
        hi = np.empty(3)
        hi[:] = self.upper
        if G.shape[0] != h.shape[0]:
            raise ValueError(f"G has {G.shape[0]} rows but h has {h.shape[0]} entries")
        if not (lo < hi).all():
            raise ValueError("box requires lower < upper on every axis")
        if not np.isfinite(np.concatenate((u, G.ravel(), h, lo, hi))).all():
            raise ValueError("QP data must be finite")
        object.__setattr__(self, "u_des", u)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def num_rows(self) -> int:
        return self.G.shape[0]

    def all_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Barrier rows followed by box rows, all as ``C u + e >= 0``."""
        eye = np.eye(3)
        C = np.vstack([self.G, eye, -eye])
        e = np.concatenate([self.h, -self.lower, self.upper])
        return C, e


@dataclass(frozen=True, eq=False)
class QpSolution:
    u_act: np.ndarray
    status: str
    active: tuple[int, ...]
    multipliers: np.ndarray
    kkt_residual: float
    iterations: int
    max_violation: float = field(default=0.0)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def barrier_active(self, num_rows: int, tol: float = 0.0) -> bool:
        """True when some barrier row (not a box row) carries a positive multiplier."""
        return bool(np.any(self.multipliers[:num_rows] > tol))


def kkt_residual(problem: QpProblem, u: np.ndarray, multipliers: np.ndarray) -> float:
    C, _ = problem.all_rows()
    return float(np.max(np.abs(u - problem.u_des - C.T @ multipliers)))


class QpSolver:
    """Stateful wrapper that warm-starts from the previous active set.

    One instance per simulation; not shared between threads.
    """

    def __init__(self, max_iter: int = 100, warm_start: bool = True, backend: str | None = None):
        self.max_iter = max_iter
        self.warm_start = warm_start
        self._kernels = kernels.get_backend(backend)
        self._warm: tuple[int, ...] = ()

    def reset(self):
        self._warm = ()

    def solve(self, problem: QpProblem) -> QpSolution:
        warm = self._warm if self.warm_start else ()
        sol = solve(problem, self.max_iter, warm, self._kernels)
        if sol.optimal:
            self._warm = sol.active
        else:
            self._warm = ()
        return sol


def solve(problem: QpProblem, max_iter: int = 100, warm=(), backend=None) -> QpSolution:
    impl = backend if backend is not None and not isinstance(backend, str) else kernels.get_backend(backend)
    u, status, mult, active, iters = impl.qp_project(
        problem.u_des, problem.G, problem.h, problem.lower, problem.upper, list(warm), max_iter)
    u = np.asarray(u, dtype=float)
    mult = np.asarray(mult, dtype=float)
    C, e = problem.all_rows()
    violation = float(max(0.0, -np.min(C @ u + e)))
    status_name = _STATUS_NAMES[int(status)]
    residual = kkt_residual(problem, u, mult) if status_name == OPTIMAL else float("inf")
    if log.isEnabledFor(logging.DEBUG):
        log.debug("qp G=%s h=%s u_des=%s -> u=%s status=%s active=%s",
                  problem.G.tolist(), problem.h.tolist(), problem.u_des.tolist(),
                  u.tolist(), status_name, active)
    return QpSolution(u, status_name, tuple(int(a) for a in active), mult, residual, int(iters), violation)
