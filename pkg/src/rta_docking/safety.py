"""Docking safety constraints, their gradients and the parameter checks.

``phi1`` is the distance dependent speed limit, ``phi2..phi4`` the per-axis
velocity caps. A state is allowable when every value is non-negative.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from rta_docking.dynamics import CwParameters

NUM_CONSTRAINTS = 4


class SingularGradient(ArithmeticError):
    """Raised when the speed-limit gradient is requested at r=0 or v=0 without regularization."""


@dataclass(frozen=True)
class SafetyParameters:
    """Constraint constants.

    ``alpha_gains`` holds one linear class-kappa slope per constraint (1/s).
    ``grad_epsilon`` floors the norms in the speed-limit gradient.
    ``barrier_margin`` is the level the barrier constraints steer toward instead
    of zero; it absorbs the first-order error of the one-second Euler step so the
    optimization filters stay strictly inside the allowable set.
    """

    nu0: float = 0.2
    nu1: float = 4 * 0.001027
    v_max: float = 10.0
    alpha_gains: tuple[float, float, float, float] = (0.05, 0.05, 0.05, 0.05)
    grad_epsilon: float = 1e-6
    barrier_margin: float = 1e-2

    def __post_init__(self):
        if not (self.nu0 > 0 and self.nu1 > 0 and self.v_max > 0):
            raise ValueError("nu0, nu1 and v_max must be > 0")
        gains = tuple(float(g) for g in self.alpha_gains)
        if len(gains) != NUM_CONSTRAINTS or any(g <= 0 for g in gains):
            raise ValueError("alpha_gains needs four positive entries")
        object.__setattr__(self, "alpha_gains", gains)
        if self.grad_epsilon < 0:
            raise ValueError("grad_epsilon must be >= 0")
        if self.barrier_margin < 0:
            raise ValueError("barrier_margin must be >= 0")

    def alpha(self, i: int, value: float) -> float:
        """Linear class-kappa function of constraint ``i`` (0-based)."""
        return self.alpha_gains[i] * value


class ConstraintVector(NamedTuple):
    phi1: float
    phi2: float
    phi3: float
    phi4: float

    @property
    def allowable(self) -> bool:
        return min(self) >= 0.0


def phi1(state, sp: SafetyParameters) -> float:
    x = np.asarray(state, dtype=float)
    r = np.sqrt(x[0] ** 2 + x[1] ** 2 + x[2] ** 2)
    v = np.sqrt(x[3] ** 2 + x[4] ** 2 + x[5] ** 2)
    return float(sp.nu0 + sp.nu1 * r - v)


def phi234(state, sp: SafetyParameters) -> tuple[float, float, float]:
    x = np.asarray(state, dtype=float)
    vm2 = sp.v_max * sp.v_max
    return (float(vm2 - x[3] ** 2), float(vm2 - x[4] ** 2), float(vm2 - x[5] ** 2))


def constraint_values(state, sp: SafetyParameters) -> ConstraintVector:
    return ConstraintVector(phi1(state, sp), *phi234(state, sp))


def grad_phi(state, sp: SafetyParameters, i: int) -> np.ndarray:
    """Analytic gradient of constraint ``i`` (1-based, as in phi1..phi4)."""
    x = np.asarray(state, dtype=float)
    g = np.zeros(6)
    if i == 1:
        eps = sp.grad_epsilon
        r = np.linalg.norm(x[0:3])
        v = np.linalg.norm(x[3:6])
        if eps == 0.0 and (r == 0.0 or v == 0.0):
            raise SingularGradient(f"speed-limit gradient undefined at |r|={r}, |v|={v}")
        g[0:3] = sp.nu1 * x[0:3] / max(r, eps)
        g[3:6] = -x[3:6] / max(v, eps)
    elif i in (2, 3, 4):
        axis = i + 1
        g[axis] = -2.0 * x[axis]
    else:
        raise ValueError(f"constraint index must be 1..4, got {i}")
    return g


def constraint_gradients(state, sp: SafetyParameters) -> np.ndarray:
    """All four gradients stacked as a (4, 6) array."""
    return np.vstack([grad_phi(state, sp, i) for i in range(1, NUM_CONSTRAINTS + 1)])


def in_allowable(state, sp: SafetyParameters) -> tuple[bool, ConstraintVector]:
    values = constraint_values(state, sp)
    return values.allowable, values


def check_lemma1(params: CwParameters, sp: SafetyParameters) -> tuple[float, bool]:
    """Thrust bound for the speed limit to be its own control-invariant set.

    The bound is compared with ``u_max`` in newtons exactly as written; note the
    right-hand side has acceleration units, so dividing by the mass would flip
    the verdict for the default vehicle (see ``lemma1_unit_discrepancy``).
    """
    n, nu0, nu1 = params.n, sp.nu0, sp.nu1
    rhs = (3 * n * n + 2 * n * nu1 + nu1 * nu1) * params.r_max + (2 * n + nu1) * nu0
    return float(rhs), bool(params.u_max >= rhs)


def lemma1_unit_discrepancy(params: CwParameters, sp: SafetyParameters) -> str | None:
    """Warning text when the literal and the mass-normalized readings disagree."""
    rhs, literal = check_lemma1(params, sp)
    accel = params.u_max / params.m
    normalized = accel >= rhs
    if literal == normalized:
        return None
    return (
        f"unit discrepancy: speed-limit bound RHS={rhs:.4f} has acceleration units; "
        f"u_max={params.u_max:g} N {'passes' if literal else 'fails'} when compared literally "
        f"but u_max/m={accel:.4f} m/s^2 {'passes' if normalized else 'fails'}"
    )


@dataclass(frozen=True)
class Lemma2Result:
    x_axis: bool
    y_axis: bool
    z_axis: bool
    margins: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    @property
    def all(self) -> bool:
        return self.x_axis and self.y_axis and self.z_axis


def check_lemma2(state, params: CwParameters) -> Lemma2Result:
    """Per-axis strict inequalities: natural acceleration below thrust authority."""
    x = np.asarray(state, dtype=float)
    n = params.n
    limit = (params.u_max / params.m) ** 2
    terms = (
        (3 * n * n * x[0] + 2 * n * x[4]) ** 2,
        (-2 * n * x[3]) ** 2,
        (-n * n * x[2]) ** 2,
    )
    margins = tuple(float(limit - t) for t in terms)
    return Lemma2Result(terms[0] < limit, terms[1] < limit, terms[2] < limit, margins)


def check_lemma2_box(params: CwParameters, sp: SafetyParameters) -> Lemma2Result:
    """Worst case of :func:`check_lemma2` over ``|r| <= r_max``, ``|v_i| <= v_max``.

    Each term is maximized by pushing its own state entries to the box edge.
    """
    R, vm = params.r_max, sp.v_max
    worst = np.array([-R, 0.0, -R, vm, -vm, 0.0])
    # x-term: 3n^2 x + 2n vy is maximized in magnitude with x and vy of equal sign
    worst_x = np.array([-R, 0.0, 0.0, 0.0, -vm, 0.0])
    rx = check_lemma2(worst_x, params)
    rest = check_lemma2(worst, params)
    return Lemma2Result(rx.x_axis, rest.y_axis, rest.z_axis, (rx.margins[0], rest.margins[1], rest.margins[2]))


def constraint_values_batch(states, sp: SafetyParameters) -> np.ndarray:
    """Constraint values for an (N, 6) stack of states, shape (N, 4)."""
    X = np.asarray(states, dtype=float).reshape(-1, 6)
    r = np.sqrt(np.einsum("ij,ij->i", X[:, 0:3], X[:, 0:3]))
    v = np.sqrt(np.einsum("ij,ij->i", X[:, 3:6], X[:, 3:6]))
    out = np.empty((X.shape[0], NUM_CONSTRAINTS))
    out[:, 0] = sp.nu0 + sp.nu1 * r - v
    out[:, 1:] = sp.v_max * sp.v_max - X[:, 3:6] ** 2
    return out


def constraint_gradients_batch(states, sp: SafetyParameters) -> np.ndarray:
    """Gradients for an (N, 6) stack of states, shape (N, 4, 6). Always regularized."""
    X = np.asarray(states, dtype=float).reshape(-1, 6)
    eps = sp.grad_epsilon
    r = np.sqrt(np.einsum("ij,ij->i", X[:, 0:3], X[:, 0:3]))
    v = np.sqrt(np.einsum("ij,ij->i", X[:, 3:6], X[:, 3:6]))
    out = np.zeros((X.shape[0], NUM_CONSTRAINTS, 6))
    out[:, 0, 0:3] = sp.nu1 * X[:, 0:3] / np.maximum(r, eps)[:, None]
    out[:, 0, 3:6] = -X[:, 3:6] / np.maximum(v, eps)[:, None]
    for axis in range(3):
        out[:, axis + 1, 3 + axis] = -2.0 * X[:, 3 + axis]
    return out
