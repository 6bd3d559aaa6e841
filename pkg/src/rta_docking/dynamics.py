"""Clohessy-Wiltshire relative motion in Hill's frame.

States are 6-vectors ``[x, y, z, vx, vy, vz]`` (m, m/s) and controls are
3-vectors of thrust (N). Everything is SI; conversions happen in the config
layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STATE_DIM = 6
CONTROL_DIM = 3


@dataclass(frozen=True)
class CwParameters:
    """Physical constants of the chief/deputy pair.

    Parameters
    ----------
    n : float
        Mean motion of the chief's circular orbit (rad/s).
    m : float
        Deputy mass (kg).
    u_max : float
        Per-axis thrust bound (N).
    r_max : float
        Radius inside which the linearization is trusted (m).
    """

    n: float = 0.001027
    m: float = 12.0
    u_max: float = 1.0
    r_max: float = 10_000.0

    def __post_init__(self):
        for name in ("n", "m", "u_max", "r_max"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0.0:
                raise ValueError(f"CwParameters.{name} must be finite and > 0, got {value!r}")


def as_state(state) -> np.ndarray:
    """Coerce to a float 6-vector, rejecting non-finite entries."""
    arr = np.asarray(state, dtype=float).reshape(STATE_DIM)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"state has non-finite entries: {arr}")
    return arr


def position_norm(state: np.ndarray) -> float:
    return float(np.sqrt(state[0] ** 2 + state[1] ** 2 + state[2] ** 2))


def velocity_norm(state: np.ndarray) -> float:
    return float(np.sqrt(state[3] ** 2 + state[4] ** 2 + state[5] ** 2))


def cw_matrices(params: CwParameters) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time system matrices ``(A, B)`` of ``xdot = A x + B u``."""
    n = params.n
    A = np.zeros((6, 6))
    A[0:3, 3:6] = np.eye(3)
    A[3, 0] = 3.0 * n * n
    A[3, 4] = 2.0 * n
    A[4, 3] = -2.0 * n
    A[5, 2] = -n * n
    B = np.zeros((6, 3))
    B[3:6, :] = np.eye(3) / params.m
    return A, B


def derivative(state, u, params: CwParameters) -> np.ndarray:
    A, B = cw_matrices(params)
    return A @ np.asarray(state, dtype=float) + B @ np.asarray(u, dtype=float)


def step_euler(state, u, params: CwParameters, dt: float) -> np.ndarray:
    """One forward-Euler step with ``u`` held over the interval."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    state = np.asarray(state, dtype=float)
    return state + dt * derivative(state, u, params)


def step_rk4(state, u, params: CwParameters, dt: float) -> np.ndarray:
    """Classical RK4 step with zero-order-held control (validation use only)."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    A, B = cw_matrices(params)
    x = np.asarray(state, dtype=float)
    bu = B @ np.asarray(u, dtype=float)
    k1 = A @ x + bu
    k2 = A @ (x + 0.5 * dt * k1) + bu
    k3 = A @ (x + 0.5 * dt * k2) + bu
    k4 = A @ (x + dt * k3) + bu
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def expm_series(M: np.ndarray, tol: float = 1e-16, max_terms: int = 200) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring around a Taylor series.

    Kept dependency-free so it can serve as an oracle independent of scipy.
    """
    M = np.asarray(M, dtype=float)
    norm = np.linalg.norm(M, ord=1)
    squarings = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0.5 else 0
    X = M / (2.0 ** squarings)
    result = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, max_terms):
        term = term @ X / k
        result = result + term
        if np.linalg.norm(term, ord=1) <= tol * np.linalg.norm(result, ord=1):
            break
    for _ in range(squarings):
        result = result @ result
    return result


def zoh_discretize(A: np.ndarray, B: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization via the augmented-matrix exponential."""
    nx, nu = B.shape
    aug = np.zeros((nx + nu, nx + nu))
    aug[:nx, :nx] = A * dt
    aug[:nx, nx:] = B * dt
    E = expm_series(aug)
    return E[:nx, :nx], E[:nx, nx:]


def free_flow_matrix(params: CwParameters, dt: float) -> np.ndarray:
    """Exact zero-thrust state transition over ``dt`` (keeps NMT targets on their ellipse)."""
    A, _ = cw_matrices(params)
    return expm_series(A * dt)
