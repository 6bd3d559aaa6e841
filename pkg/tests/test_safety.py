import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from rta_docking.dynamics import CwParameters
from rta_docking.safety import (
    SafetyParameters,
    SingularGradient,
    check_lemma1,
    check_lemma2,
    check_lemma2_box,
    constraint_gradients,
    constraint_gradients_batch,
    constraint_values,
    constraint_values_batch,
    grad_phi,
    in_allowable,
    lemma1_unit_discrepancy,
    phi1,
    phi234,
)

N = 0.001027
SP = SafetyParameters()
comp = st.floats(-5000, 5000, allow_nan=False)
vel = st.floats(-12, 12, allow_nan=False)
states = st.tuples(comp, comp, comp, vel, vel, vel).map(np.array)


def central_difference(f, x, h=1e-4):
    g = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_phi1_examples():
    assert phi1(np.zeros(6), SP) == 0.2
    s = 9850 / math.sqrt(2)
    x = np.array([-s, -s, 0, 0.5, 0.5, 0.5])
    assert phi1(x, SP) == pytest.approx(0.2 + 0.004108 * 9850 - math.sqrt(0.75), abs=1e-9)
    assert phi1(x, SP) == pytest.approx(39.798, abs=1e-3)
    r = 1234.0
    on = np.array([r, 0, 0, 0, -(0.2 + 4 * N * r), 0])
    assert phi1(on, SP) == pytest.approx(0.0, abs=1e-12)


def test_phi234_examples():
    assert phi234(np.zeros(6), SP) == (100.0, 100.0, 100.0)
    assert phi234([0, 0, 0, 10, 0, 0], SP)[0] == 0.0
    assert phi234([0, 0, 0, 0, -3, 0], SP)[1] == 91.0
    assert phi234([0, 0, 0, 0, 3, 0], SP)[1] == 91.0


def test_in_allowable_examples():
    ok, vals = in_allowable(np.zeros(6), SP)
    assert ok
    ok, vals = in_allowable([0, 0, 0, 11, 0, 0], SP)
    assert not ok and vals.phi2 == -21.0
    s = 9850 / math.sqrt(2)
    assert in_allowable([-s, -s, 0, 0.5, 0.5, 0.5], SP)[0]


def test_gradient_examples():
    np.testing.assert_array_equal(grad_phi([0, 0, 0, 2, 0, 0], SP, 2), [0, 0, 0, -4, 0, 0])
    g = grad_phi([100, 0, 0, 0, 0, 0], SP, 1)
    assert np.all(np.isfinite(g))
    with pytest.raises(SingularGradient):
        grad_phi([100, 0, 0, 0, 0, 0], SafetyParameters(grad_epsilon=0.0), 1)
    with pytest.raises(ValueError):
        grad_phi(np.zeros(6), SP, 5)


def test_phi1_gradient_generic_state():
    x = np.array([300.0, -420.0, 80.0, 0.7, -1.1, 0.4])
    fd = central_difference(lambda y: phi1(y, SP), x)
    g = grad_phi(x, SP, 1)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


@given(states)
def test_gradients_match_central_differences(x):
    assume(np.linalg.norm(x[0:3]) > 10 and np.linalg.norm(x[3:6]) > 0.1)
    G = constraint_gradients(x, SP)
    for i in range(4):
        fd = central_difference(lambda y: constraint_values(y, SP)[i], x)
        scale = max(np.linalg.norm(fd), 1e-3)  # roundoff floor for the quadratics
        assert np.linalg.norm(G[i] - fd) / scale < 1e-5


@given(states)
def test_batch_matches_scalar(x):
    np.testing.assert_allclose(constraint_values_batch(x, SP)[0], constraint_values(x, SP), rtol=1e-14,
                               atol=1e-12)
    np.testing.assert_allclose(constraint_gradients_batch(x, SP)[0], constraint_gradients(x, SP),
                               rtol=1e-14, atol=1e-15)


@given(states, st.integers(0, 2))
def test_velocity_caps_even(x, axis):
    y = x.copy()
    y[3 + axis] = -y[3 + axis]
    assert phi234(x, SP)[axis] == phi234(y, SP)[axis]


@given(states, st.floats(0, 2 * math.pi), st.floats(0, math.pi))
def test_phi1_rotation_invariant(x, yaw, pitch):
    cz, sz, cy, sy = math.cos(yaw), math.sin(yaw), math.cos(pitch), math.sin(pitch)
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    R = Rz @ Ry
    y = np.concatenate([R @ x[0:3], R @ x[3:6]])
    assert phi1(y, SP) == pytest.approx(phi1(x, SP), abs=1e-9)


def test_parameters_validated():
    for bad in ({"nu0": 0}, {"nu1": -1}, {"v_max": 0}, {"alpha_gains": (1, 1, 1)},
                {"alpha_gains": (1, 1, 1, 0)}, {"grad_epsilon": -1}, {"barrier_margin": -1}):
        with pytest.raises(ValueError):
            SafetyParameters(**bad)


def test_lemma1_default_values():
    rhs, ok = check_lemma1(CwParameters(), SP)
    assert rhs == pytest.approx(0.2860, abs=5e-5)
    assert ok


def test_lemma1_zero_and_linear():
    # nu0 = nu1 = 0 and R_max = 0 are outside the validated ranges, so build the bound by hand
    n = N
    base = CwParameters()
    rhs1, _ = check_lemma1(base, SP)
    rhs2, _ = check_lemma1(CwParameters(r_max=2 * base.r_max), SP)
    constant = (2 * n + SP.nu1) * SP.nu0
    assert rhs2 - constant == pytest.approx(2 * (rhs1 - constant), rel=1e-14)
    tiny = SafetyParameters(nu0=1e-300, nu1=1e-300)
    rhs, ok = check_lemma1(CwParameters(r_max=1e-300), tiny)
    assert rhs == pytest.approx(0.0, abs=1e-200) and ok


def test_unit_discrepancy_warning():
    msg = lemma1_unit_discrepancy(CwParameters(), SP)
    assert msg is not None and "unit discrepancy" in msg and "0.2860" in msg and "0.0833" in msg
    assert lemma1_unit_discrepancy(CwParameters(u_max=12), SP) is None


def test_lemma2_examples():
    p = CwParameters()
    assert check_lemma2(np.zeros(6), p).all
    r = check_lemma2([-1e4, 0, 0, 0, 0, 0], p)
    assert r.x_axis and abs(3 * N * N * -1e4) == pytest.approx(0.0316, abs=1e-4)
    r = check_lemma2([0, 0, 0, 10, 0, 0], p)
    assert r.y_axis and abs(2 * N * 10) == pytest.approx(0.02054, abs=1e-5)
    assert not check_lemma2([0, 0, 0, 100, 0, 0], p).y_axis


def test_lemma2_box_default():
    box = check_lemma2_box(CwParameters(), SP)
    assert box.all and min(box.margins) > 0
