"""Closed elliptical natural motion trajectories (NMTs) used as the backup set."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from rta_docking.dynamics import CwParameters
from rta_docking.safety import SafetyParameters

_TINY = 1e-15
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class DegenerateGeometry(ValueError):
    """The out-of-plane amplitude is undefined (sin(theta1) == 0)."""


class EmptyLibrary(ValueError):
    """No grid point passed the admissibility test."""


def _clean(value: float) -> float:
    return 0.0 if abs(value) < _TINY else value


def out_of_plane_amplitude(b: float, theta1: float, theta2: float) -> float:
    s1 = _clean(math.sin(theta1))
    if s1 == 0.0:
        raise DegenerateGeometry(f"sin(theta1) == 0 for theta1={theta1}")
    c1 = _clean(math.cos(theta1))
    t2 = _clean(math.tan(theta2))
    return b / s1 * math.sqrt(t2 * t2 + 4.0 * c1 * c1)


def phase_offset(theta1: float, theta2: float) -> float:
    """In-plane angle offset, ``atan2`` form so the quadrant is unambiguous."""
    return math.atan2(2.0 * _clean(math.cos(theta1)), _clean(math.tan(theta2)))


@dataclass(frozen=True)
class NmtDescriptor:
    b: float
    theta1: float
    theta2: float
    psi: float
    c: float = field(init=False)
    nu: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "c", out_of_plane_amplitude(self.b, self.theta1, self.theta2))
        object.__setattr__(self, "nu", phase_offset(self.theta1, self.theta2) - self.psi)

    def to_dict(self) -> dict:
        return {"b": self.b, "theta1": self.theta1, "theta2": self.theta2,
                "psi": self.psi, "c": self.c, "nu": self.nu}


def nmt_state(desc: NmtDescriptor, phase: float, n: float) -> np.ndarray:
    """State on the NMT with the out-of-plane phase set to ``phase``.

    The in-plane phase follows from ``phase`` through the descriptor's offset,
    so ``nmt_state(desc, desc.psi, n)`` is the descriptor's own initial state.
    """
    nu = phase_offset(desc.theta1, desc.theta2) - phase
    b, c = desc.b, desc.c
    sn, cn = math.sin(nu), math.cos(nu)
    sp, cp = math.sin(phase), math.cos(phase)
    return np.array([b * sn, 2.0 * b * cn, c * sp, b * n * cn, -2.0 * b * n * sn, n * c * cp])


def nmt_states(desc: NmtDescriptor, phases: np.ndarray, n: float) -> np.ndarray:
    phases = np.asarray(phases, dtype=float)
    nu = phase_offset(desc.theta1, desc.theta2) - phases
    b, c = desc.b, desc.c
    return np.stack([b * np.sin(nu), 2.0 * b * np.cos(nu), c * np.sin(phases),
                     b * n * np.cos(nu), -2.0 * b * n * np.sin(nu), n * c * np.cos(phases)], axis=-1)


def admissible(desc: NmtDescriptor, sp: SafetyParameters, params: CwParameters) -> bool:
    """Sufficient conditions for the whole ellipse to stay inside the safe set.

    The speed-limit part assumes ``nu0 = 0`` (conservative).
    """
    s1 = _clean(math.sin(desc.theta1))
    if s1 == 0.0:
        raise DegenerateGeometry(f"sin(theta1) == 0 for theta1={desc.theta1}")
    c1 = _clean(math.cos(desc.theta1))
    t2 = _clean(math.tan(desc.theta2))
    n = params.n
    lhs = (t2 * t2 + 4.0 * c1 * c1) / (s1 * s1)
    rhs = (sp.nu1 / n) ** 2 - 4.0
    return bool(desc.b > 0 and lhs <= rhs and desc.b <= sp.v_max / (2 * n) and desc.c <= sp.v_max / n)


@dataclass(frozen=True)
class NmtGridSpec:
    b_values: tuple[float, ...] = (25.0, 50.0, 100.0, 200.0, 500.0, 1000.0, 2000.0, 4000.0)
    theta1_values: tuple[float, ...] = (math.pi / 2,)
    theta2_values: tuple[float, ...] = (0.0,)
    psi_values: tuple[float, ...] = (0.0,)
    phase_samples: int = 64

    def __post_init__(self):
        for name in ("b_values", "theta1_values", "theta2_values", "psi_values"):
            values = tuple(float(v) for v in getattr(self, name))
            if not values:
                raise ValueError(f"NmtGridSpec.{name} must be non-empty")
            object.__setattr__(self, name, values)
        if self.phase_samples < 1:
            raise ValueError("phase_samples must be >= 1")


@dataclass(frozen=True, eq=False)
class NmtLibrary:
    descriptors: tuple[NmtDescriptor, ...]
    n: float
    phase_samples: int
    phases: np.ndarray
    sample_states: np.ndarray  # (N, P, 6)

    def __len__(self) -> int:
        return len(self.descriptors)

    def to_dict(self) -> dict:
        return {
            "mean_motion": self.n,
            "phase_samples": self.phase_samples,
            "members": [d.to_dict() for d in self.descriptors],
        }


def library_from_descriptors(descriptors, n: float, phase_samples: int = 64) -> NmtLibrary:
    descriptors = tuple(descriptors)
    if not descriptors:
        raise EmptyLibrary("no admissible NMT in grid")
    phases = 2.0 * np.pi * np.arange(phase_samples) / phase_samples
    samples = np.stack([nmt_states(d, phases, n) for d in descriptors])
    return NmtLibrary(descriptors, n, phase_samples, phases, samples)


def build_library(grid: NmtGridSpec, sp: SafetyParameters, params: CwParameters) -> NmtLibrary:
    members = []
    for b, t1, t2, psi in itertools.product(grid.b_values, grid.theta1_values,
                                            grid.theta2_values, grid.psi_values):
        desc = NmtDescriptor(b, t1, t2, psi)
        if admissible(desc, sp, params):
            members.append(desc)
    return library_from_descriptors(members, params.n, grid.phase_samples)


def _position_dist2(desc: NmtDescriptor, phase: float, pos: np.ndarray, n: float) -> float:
    s = nmt_state(desc, phase, n)
    d = s[0:3] - pos
    return float(d @ d)


def closest_target(state, lib: NmtLibrary, refine_tol: float = 1e-7):
    """Closest library point to ``state`` by position.

    Returns ``(index, descriptor, phase, target_state)``. The sampled grid
    argmin (ties: lowest index, then lowest phase) is polished with one golden
    section search over the neighbouring sample intervals.
    """
    pos = np.asarray(state, dtype=float)[0:3]
    diff = lib.sample_states[:, :, 0:3] - pos
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    flat = int(np.argmin(dist2))
    idx, k = divmod(flat, lib.phase_samples)
    desc = lib.descriptors[idx]
    best_phase = float(lib.phases[k])
    best = float(dist2[idx, k])
    if best == 0.0 or lib.phase_samples < 3:
        return idx, desc, best_phase, lib.sample_states[idx, k].copy()

    step = 2.0 * np.pi / lib.phase_samples
    lo, hi = best_phase - step, best_phase + step
    a = hi - _GOLDEN * (hi - lo)
    b = lo + _GOLDEN * (hi - lo)
    fa = _position_dist2(desc, a, pos, lib.n)
    fb = _position_dist2(desc, b, pos, lib.n)
    while hi - lo > refine_tol:
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - _GOLDEN * (hi - lo)
            fa = _position_dist2(desc, a, pos, lib.n)
        else:
            lo, a, fa = a, b, fb
            b = lo + _GOLDEN * (hi - lo)
            fb = _position_dist2(desc, b, pos, lib.n)
    phase = 0.5 * (lo + hi)
    if _position_dist2(desc, phase, pos, lib.n) < best:
        best_phase = phase % (2.0 * np.pi)
        return idx, desc, best_phase, nmt_state(desc, best_phase, lib.n)
    return idx, desc, best_phase, lib.sample_states[idx, k].copy()
