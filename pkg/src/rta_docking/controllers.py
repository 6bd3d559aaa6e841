"""Primary docking LQR, NMT-tracking backup LQR and the explicit backup law."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from rta_docking.dynamics import CwParameters, cw_matrices, zoh_discretize, step_euler
from rta_docking.nmt import NmtLibrary, closest_target
from rta_docking.safety import SafetyParameters, constraint_values


class RiccatiDivergence(RuntimeError):
    """The discrete Riccati iteration did not reach a fixed point."""


@dataclass(frozen=True, eq=False)
class LqrGains:
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    iterations: int = 0

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "Q": self.Q.tolist(), "R": self.R.tolist(),
                "iterations": self.iterations}


def riccati_fixed_point(Ad, Bd, Q, R, P0=None, rtol=1e-10, max_iter=100_000):
    """Iterate ``P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA`` until it stops moving.

    Returns ``(P, K, iterations)``.
    """
    P = np.array(Q if P0 is None else P0, dtype=float)
    for it in range(1, max_iter + 1):
        BtP = Bd.T @ P
        K = np.linalg.solve(R + BtP @ Bd, BtP @ Ad)
        with np.errstate(over="ignore", invalid="ignore"):
            P_next = Q + Ad.T @ P @ (Ad - Bd @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            raise RiccatiDivergence("Riccati iterate became non-finite")
        # max-abs norms: the Frobenius norm overflows long before P does
        scale = max(np.max(np.abs(P_next)), 1e-300)
        change = np.max(np.abs(P_next - P))
        P = P_next
        if change <= rtol * scale:
            BtP = Bd.T @ P
            K = np.linalg.solve(R + BtP @ Bd, BtP @ Ad)
            return P, K, it
    raise RiccatiDivergence(f"no Riccati fixed point after {max_iter} iterations")


def solve_lqr(A, B, Q, R, dt: float, rtol: float = 1e-10, max_iter: int = 100_000) -> LqrGains:
    """Steady-state discrete LQR gain for the ZOH discretization of ``(A, B)``.

    Control law is ``u = -K x``.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    Ad, Bd = zoh_discretize(np.asarray(A, float), np.asarray(B, float), dt)
    if not np.any(Q):
        K = np.zeros((B.shape[1], A.shape[0]))
        return LqrGains(K, Q, R, np.zeros_like(Q), 0)
    P, K, iters = riccati_fixed_point(Ad, Bd, Q, R, rtol=rtol, max_iter=max_iter)
    return LqrGains(K, Q, R, P, iters)


def lqr_weights(position_weight: float, velocity_weight: float, input_weight: float):
    Q = np.diag([position_weight] * 3 + [velocity_weight] * 3)
    R = input_weight * np.eye(3)
    return Q, R


def saturate(u, u_max: float) -> np.ndarray:
    return np.clip(u, -u_max, u_max)


def primary_control(state, gains: LqrGains, params: CwParameters, target=None) -> np.ndarray:
    """Unconstrained docking LQR, saturated to the thrust box. Ignores safety."""
    x = np.asarray(state, dtype=float)
    if target is not None:
        x = x - np.asarray(target, dtype=float)
    return saturate(-gains.K @ x, params.u_max)


@dataclass(frozen=True, eq=False)
class BackupTrackerState:
    """Engagement of the NMT-tracking backup.

    ``target`` is the desired state at the time of the next call.
    """

    engaged: bool = False
    index: int = -1
    phase: float = 0.0
    handover: bool = False
    target: Optional[np.ndarray] = None


IDLE_TRACKER = BackupTrackerState()


def engage_tracker(state, lib: NmtLibrary) -> BackupTrackerState:
    idx, _, phase, target = closest_target(state, lib)
    return BackupTrackerState(True, idx, phase, False, target)


def backup_control_lqr(state, tracker: BackupTrackerState, lib: NmtLibrary, gains: LqrGains,
                       params: CwParameters, eps: float, flow: np.ndarray,
                       track_before_handover: bool = False):
    """One step of the NMT-tracking backup.

    ``flow`` is the exact zero-thrust transition over one control interval,
    used to move the target along its NMT after handover. With
    ``track_before_handover`` the target moves from the moment of engagement,
    which makes the tracking error dynamics linear and lets handover happen
    from far away.
    Returns ``(u, next_tracker)``.
    """
    x = np.asarray(state, dtype=float)
    if not tracker.engaged:
        tracker = engage_tracker(x, lib)
    target = tracker.target
    u = saturate(-gains.K @ (x - target), params.u_max)
    handover = tracker.handover
    if not handover:
        d = x[0:3] - target[0:3]
        handover = bool(np.sqrt(d @ d) < eps)
    next_target = flow @ target if handover or track_before_handover else target
    return u, replace(tracker, handover=handover, target=next_target)


def backup_control_explicit(state, sp: SafetyParameters, params: CwParameters,
                            dt: Optional[float] = None) -> np.ndarray:
    """Full-authority recovery command for constraints at or past their boundary.

    Velocity caps are handled first (brake the offending axis), then the speed
    limit overrides: thrust along ``nu1 * r_hat - v_hat`` scaled to the box.
    With ``dt`` given, a constraint also counts as violated when one interval
    of zero-thrust drift would put it at or past the boundary.
    """
    x = np.asarray(state, dtype=float)
    u_max = params.u_max
    now = constraint_values(x, sp)
    if dt is not None:
        ahead = constraint_values(step_euler(x, np.zeros(3), params, dt), sp)
        violated = [min(a, b) <= 0.0 for a, b in zip(now, ahead)]
    else:
        violated = [v <= 0.0 for v in now]
    u = np.zeros(3)
    for axis in range(3):
        if violated[axis + 1] and x[3 + axis] != 0.0:
            u[axis] = -np.sign(x[3 + axis]) * u_max
    if violated[0]:
        eps = max(sp.grad_epsilon, 1e-12)
        r, v = x[0:3], x[3:6]
        r_hat = r / max(np.linalg.norm(r), eps)
        v_hat = v / max(np.linalg.norm(v), eps)
        direction = sp.nu1 * r_hat - v_hat
        peak = np.max(np.abs(direction))
        if peak > 0.0:
            u = u_max * direction / peak
    return saturate(u, u_max)
