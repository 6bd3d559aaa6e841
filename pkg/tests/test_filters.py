from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rta_docking.controllers import engage_tracker
from rta_docking.dynamics import derivative, step_euler
from rta_docking.filters import (
    PASSTHROUGH,
    QP_FALLBACK,
    QP_MODIFIED,
    SWITCHED,
    BackupHorizon,
    FilterDecision,
    FilterDeps,
    FilterKind,
    LatchingFilter,
    RtaFilter,
    backup_rollout,
    build_explicit_barriers,
    build_implicit_barriers,
    make_filter,
    propagate_sensitivity,
)
from rta_docking.nmt import closest_target, nmt_state
from rta_docking.qp import QpProblem, solve
from rta_docking.safety import constraint_gradients, constraint_values, constraint_values_batch
from rta_docking.sim import build_scenario, default_config, run_scenario

INTERIOR = np.array([-2000.0, 1500.0, 300.0, 1.0, -0.5, 0.2])


def random_safe_state(rng, sp, r_range=(500.0, 6000.0), speed_frac=0.6):
    d = rng.normal(size=3)
    r = d / np.linalg.norm(d) * rng.uniform(*r_range)
    limit = sp.nu0 + sp.nu1 * np.linalg.norm(r)
    w = rng.normal(size=3)
    v = w / np.linalg.norm(w) * rng.uniform(0.05, speed_frac) * limit
    return np.concatenate([r, v])


def deps_with(deps, **changes):
    base = dict(params=deps.params, sp=deps.sp, library=deps.library, backup_gains=deps.backup_gains,
                dt=deps.dt, horizon=deps.horizon, handover_eps=deps.handover_eps,
                qp_max_iter=deps.qp_max_iter, backend=deps.backend, implicit_form=deps.implicit_form,
                track_before_handover=deps.track_before_handover)
    base.update(changes)
    return FilterDeps(**base)


# -- kinds and plumbing ------------------------------------------------------------------------

def test_kind_parsing():
    assert FilterKind.parse("eo") is FilterKind.EXPLICIT_OPTIMIZATION
    assert FilterKind.parse("implicit-switching") is FilterKind.IMPLICIT_SWITCHING
    assert FilterKind.parse(FilterKind.NONE) is FilterKind.NONE
    with pytest.raises(ValueError):
        FilterKind.parse("bogus")


def test_horizon_samples():
    hz = BackupHorizon(5.0, 1.0)
    assert hz.steps == 5 and hz.num_samples == 6
    np.testing.assert_array_equal(hz.times, np.arange(6.0))
    assert BackupHorizon(0.0, 1.0).num_samples == 1
    with pytest.raises(ValueError):
        BackupHorizon(2.5, 1.0)


@pytest.mark.parametrize("kind", list(FilterKind))
def test_interior_passthrough(kind, deps):
    """Deep inside the safe set a modest command goes through untouched."""
    u = np.array([0.1, -0.2, 0.05])
    f = make_filter(kind, deps)
    d = f(INTERIOR, u)
    assert d.mechanism == PASSTHROUGH and not d.intervened
    np.testing.assert_array_equal(d.u_act, u)
    assert d.latency >= 0.0


# -- explicit switching ------------------------------------------------------------------------

def test_explicit_switching_at_velocity_cap(deps):
    sp = deps.sp
    # at +x the tidal drift alone carries vx over the cap within one step
    x = np.array([3000.0, 200.0, 0.0, sp.v_max - 0.001, 0.0, 0.0])
    f = make_filter(FilterKind.EXPLICIT_SWITCHING, deps)
    d = f(x, np.array([1.0, 0.0, 0.0]))
    assert d.mechanism == SWITCHED and d.intervened
    assert d.u_act[0] < 0  # brakes the capped axis
    assert constraint_values(step_euler(x, d.u_act, deps.params, deps.dt), sp).phi2 >= 0


# -- explicit barrier rows ---------------------------------------------------------------------

def test_phi2_row_symbolic(deps):
    sp, p = deps.sp, deps.params
    x = np.array([120.0, -40.0, 7.0, 1.3, -0.4, 0.2])
    G, h = build_explicit_barriers(x, sp, p)
    n, vx, vy = p.n, x[3], x[4]
    np.testing.assert_allclose(G[1], [-2 * vx / p.m, 0, 0], rtol=1e-14)
    phi2 = sp.v_max ** 2 - vx ** 2
    expected = -2 * vx * (3 * n * n * x[0] + 2 * n * vy) + sp.alpha_gains[1] * (phi2 - sp.barrier_margin)
    assert h[1] == pytest.approx(expected, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_explicit_rows_are_lie_derivatives(seed):
    """``G u + h`` minus the class-K term equals the directional derivative of phi along f(x, u)."""
    from rta_docking.dynamics import CwParameters
    from rta_docking.safety import SafetyParameters
    p, sp = CwParameters(), SafetyParameters()
    rng = np.random.default_rng(seed)
    x = random_safe_state(rng, sp)
    u = rng.uniform(-1, 1, 3)
    G, h = build_explicit_barriers(x, sp, p)
    lam = np.asarray(sp.alpha_gains)
    phi = np.array(constraint_values(x, sp))
    f = derivative(x, u, p)
    s = 1e-3 / max(np.linalg.norm(f), 1e-9)
    fd = (np.array(constraint_values(x + s * f, sp)) - np.array(constraint_values(x - s * f, sp))) / (2 * s)
    lie = G @ u + h - lam * (phi - sp.barrier_margin)
    np.testing.assert_allclose(lie, fd, rtol=1e-5, atol=1e-9 * max(1.0, np.abs(fd).max()))


def test_origin_rows_trivially_satisfiable(deps):
    """At rest at the origin the gradient floor keeps the rows finite and u = 0 feasible."""
    G, h = build_explicit_barriers(np.zeros(6), deps.sp, deps.params)
    assert np.all(np.isfinite(G)) and np.all(np.isfinite(h))
    assert np.all(h >= 0)
    sol = solve(QpProblem(np.zeros(3), G, h, -np.ones(3), np.ones(3)))
    assert sol.optimal
    np.testing.assert_array_equal(sol.u_act, np.zeros(3))


def test_explicit_optimization_active_barrier(deps):
    """Pushing outward at the speed limit: the barrier binds and the KKT system is tight."""
    sp, p = deps.sp, deps.params
    r = np.array([-1500.0, 400.0, 0.0])
    limit = sp.nu0 + sp.nu1 * np.linalg.norm(r)
    v = -r / np.linalg.norm(r) * (limit - 0.02)
    x = np.concatenate([r, v])
    u_des = -r / np.linalg.norm(r)  # accelerate toward the origin, i.e. faster
    f = make_filter(FilterKind.EXPLICIT_OPTIMIZATION, deps)
    d = f(x, u_des)
    assert d.mechanism == QP_MODIFIED and d.barrier_active and d.max_multiplier > 0
    G, h = build_explicit_barriers(x, sp, p, deps.A, deps.B)
    sol = solve(QpProblem(u_des, G, h, -np.ones(3), np.ones(3)))
    assert sol.kkt_residual < 1e-8
    slack = G @ sol.u_act + h
    assert abs(slack[0]) < 1e-10 and slack.min() >= -1e-10
    np.testing.assert_allclose(d.u_act, sol.u_act, atol=1e-12)


# -- backup rollout and sensitivities ----------------------------------------------------------

def _rollout_fixed(x, deps, tracker, hz):
    return backup_rollout(x, deps, hz, tracker, want_sens=False).states


def test_sensitivity_matches_finite_differences(deps):
    """D_j against central differences of the rollout, target held fixed (10 safe states)."""
    rng = np.random.default_rng(11)
    hz = BackupHorizon(5.0, 1.0)
    checked = 0
    while checked < 10:
        x = random_safe_state(rng, deps.sp)
        tracker = engage_tracker(x, deps.library)
        if np.linalg.norm(x[0:3] - tracker.target[0:3]) < 2 * deps.handover_eps:
            continue
        roll = propagate_sensitivity(x, hz, deps, tracker)
        h = 1e-3
        fd = np.empty((hz.num_samples, 6, 6))
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            fd[:, :, k] = (_rollout_fixed(x + e, deps, tracker, hz) - _rollout_fixed(x - e, deps, tracker, hz)) / (2 * h)
        scale = np.abs(roll.sens).max(axis=(1, 2), keepdims=True)
        assert np.abs(roll.sens - fd).max() <= 1e-3 * scale.max()
        checked += 1


def test_sensitivity_zero_gain_and_zero_horizon(deps):
    A, dt = deps.A, 1.0
    zero = replace(deps.backup_gains, K=np.zeros_like(deps.backup_gains.K))
    d0 = deps_with(deps, backup_gains=zero)
    roll = propagate_sensitivity(INTERIOR, BackupHorizon(5.0, dt), d0)
    M = np.eye(6) + dt * A
    for j in range(6):
        np.testing.assert_allclose(roll.sens[j], np.linalg.matrix_power(M, j), rtol=1e-13, atol=1e-15)
    short = propagate_sensitivity(INTERIOR, BackupHorizon(0.0, dt), deps)
    assert short.sens.shape == (1, 6, 6)
    np.testing.assert_array_equal(short.sens[0], np.eye(6))
    np.testing.assert_array_equal(short.states[0], INTERIOR)


def test_backends_agree_on_rollouts(deps):
    from rta_docking import kernels
    if len(kernels.available_backends()) < 2:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(3)
    dc, dp = deps_with(deps, backend="compiled"), deps_with(deps, backend="python")
    for _ in range(50):
        x = random_safe_state(rng, deps.sp)
        tracker = engage_tracker(x, deps.library)
        a = propagate_sensitivity(x, BackupHorizon(20.0, 1.0), dc, tracker)
        b = propagate_sensitivity(x, BackupHorizon(20.0, 1.0), dp, tracker)
        np.testing.assert_allclose(a.states, b.states, rtol=1e-13, atol=1e-10)
        np.testing.assert_allclose(a.sens, b.sens, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(a.saturated, b.saturated)


# -- implicit barrier rows ---------------------------------------------------------------------

@pytest.mark.parametrize("form", ["flow", "anchored"])
def test_implicit_rows_reduce_at_first_sample(deps, form):
    sp, p = deps.sp, deps.params
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = random_safe_state(rng, sp)
        roll = propagate_sensitivity(x, deps.horizon, deps)
        G, h = build_implicit_barriers(x, roll, sp, p, deps.A, deps.B, form)
        assert G.shape == (24, 3) and h.shape == (24,)
        Ge, he = build_explicit_barriers(x, sp, p, deps.A, deps.B)
        np.testing.assert_allclose(G[:4], Ge, rtol=1e-10, atol=1e-12)
        if form == "flow":
            expected = he
        else:
            grads = constraint_gradients(x, sp)
            expected = he - grads @ (deps.A @ x + deps.B @ roll.controls[0])
        np.testing.assert_allclose(h[:4], expected, rtol=1e-10, atol=1e-10)


def test_implicit_rows_reject_bad_input(deps):
    roll = backup_rollout(INTERIOR, deps)
    with pytest.raises(ValueError):
        build_implicit_barriers(INTERIOR, roll, deps.sp, deps.params)
    roll = propagate_sensitivity(INTERIOR, deps.horizon, deps)
    with pytest.raises(ValueError):
        build_implicit_barriers(INTERIOR, roll, deps.sp, deps.params, form="other")


# -- implicit switching ------------------------------------------------------------------------

def test_implicit_switching_on_nmt_passes(deps):
    """Coasting on an admissible NMT keeps the backup rollout safe."""
    f = make_filter(FilterKind.IMPLICIT_SWITCHING, deps)
    n = deps.params.n
    for desc in deps.library.descriptors:
        for phase in (0.0, 1.3, 4.0):
            x = nmt_state(desc, phase, n)
            d = f(x, np.zeros(3))
            assert d.mechanism == PASSTHROUGH


def test_implicit_switching_threshold_along_velocity_ray(deps):
    """Bisect speed along an inbound ray: slower passes, faster switches, and the
    threshold sits inside the explicit speed limit."""
    sp = deps.sp
    r = np.array([-800.0, 600.0, 100.0])
    rhat = r / np.linalg.norm(r)
    limit = sp.nu0 + sp.nu1 * np.linalg.norm(r)
    f = make_filter(FilterKind.IMPLICIT_SWITCHING, deps)

    def switches(speed):
        f.reset()
        return f(np.concatenate([r, -rhat * speed]), np.zeros(3)).mechanism == SWITCHED

    lo, hi = 0.0, 2.0 * limit
    assert not switches(lo) and switches(hi)
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if switches(mid) else (mid, hi)
    assert hi - lo < 1e-9
    assert 0.5 * limit < lo <= limit
    assert not switches(0.9 * lo) and switches(1.1 * hi)


# -- implicit optimization ---------------------------------------------------------------------

def test_implicit_optimization_interior_and_active(deps):
    f = make_filter(FilterKind.IMPLICIT_OPTIMIZATION, deps)
    u = np.array([0.2, 0.1, -0.1])
    d = f(INTERIOR, u)
    assert d.mechanism == PASSTHROUGH
    np.testing.assert_array_equal(d.u_act, u)
    sp = deps.sp
    r = np.array([-1500.0, 400.0, 0.0])
    limit = sp.nu0 + sp.nu1 * np.linalg.norm(r)
    x = np.concatenate([r, -r / np.linalg.norm(r) * (limit - 0.02)])
    d = f(x, -r / np.linalg.norm(r))
    assert d.mechanism == QP_MODIFIED and d.barrier_active


def test_latency_grows_with_horizon(deps):
    """More backup samples cost more; compared with a wide horizon gap to stay clear of timer noise."""
    rng = np.random.default_rng(8)
    states = [random_safe_state(rng, deps.sp) for _ in range(40)]

    def best_latency(T):
        f = make_filter(FilterKind.IMPLICIT_OPTIMIZATION, deps_with(deps, horizon=BackupHorizon(T, 1.0)))
        lat = []
        for x in states:
            f.reset()
            lat.append(min(f(x, np.zeros(3)).latency for _ in range(3)))
        return float(np.median(lat))

    best_latency(2.0)  # warm up
    assert any(best_latency(200.0) > 1.5 * best_latency(2.0) for _ in range(3))


# -- latching ----------------------------------------------------------------------------------

def test_latching_never_triggered_is_transparent(scenario):
    cfg = default_config().replace(filter="eo", duration=400)
    plain = run_scenario(cfg, scenario)
    wrapped = run_scenario(cfg, scenario, rta=LatchingFilter(scenario.make_filter("eo")))
    assert len(plain.records) == len(wrapped.records)
    assert all(a.same_trajectory(b) for a, b in zip(plain.records, wrapped.records))


class _AlwaysFallback(RtaFilter):
    def _filter(self, state, u_des):
        return FilterDecision(np.zeros(3), True, QP_FALLBACK, qp_status="infeasible")


def test_latching_after_consecutive_fallbacks(deps):
    f = LatchingFilter(_AlwaysFallback(deps), fallback_limit=3)
    for i in range(2):
        assert f(INTERIOR, np.zeros(3)).mechanism == QP_FALLBACK and not f.latched
    assert f(INTERIOR, np.zeros(3)).mechanism == QP_FALLBACK
    assert f.latched and f.latch_count == 1
    assert f(INTERIOR, np.zeros(3)).mechanism == SWITCHED


def test_manual_latch(deps):
    f = LatchingFilter(make_filter(FilterKind.EXPLICIT_OPTIMIZATION, deps))
    assert f(INTERIOR, np.zeros(3)).mechanism == PASSTHROUGH
    f.latch()
    assert f(INTERIOR, np.zeros(3)).mechanism == SWITCHED
    f.reset()
    assert not f.latched and f(INTERIOR, np.zeros(3)).mechanism == PASSTHROUGH


@pytest.fixture(scope="module")
def latched_run():
    cfg = default_config().replace(filter="eo", track_before_handover=True)
    sc = build_scenario(cfg)
    rta = LatchingFilter(sc.make_filter(), trigger_step=100)
    return sc, rta, run_scenario(cfg, sc, rta=rta)


def test_latched_run_releases_on_nmt(latched_run):
    sc, rta, result = latched_run
    recs = result.records
    assert rta.latch_count == 1 and rta.release_count == 1
    after = [r.mechanism for r in recs[100:]]
    release = 100 + next(i for i, m in enumerate(after) if m != SWITCHED)
    assert all(m == SWITCHED for m in after[: release - 100])
    assert release > 200
    x = recs[release].state
    _, _, _, target = closest_target(x, sc.deps.library)
    dist = np.linalg.norm(x[0:3] - target[0:3])
    assert dist <= sc.deps.handover_eps
    assert min(constraint_values(x, sc.deps.sp)) >= 0
    assert min(result.summary["min_phi"]) > 0
    assert result.summary["docked"]


def test_rollout_phi_nonnegative_from_safe_states(deps):
    """Backup from mild safe states stays inside the allowable set over the horizon."""
    rng = np.random.default_rng(21)
    for _ in range(50):
        x = random_safe_state(rng, deps.sp, speed_frac=0.3)
        roll = backup_rollout(x, deps, BackupHorizon(30.0, 1.0))
        assert constraint_values_batch(roll.states, deps.sp).min() >= 0
