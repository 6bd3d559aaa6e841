"""Pure-Python reference for the hot kernels.

Mirrors ``_kernels.pyx`` call for call; selected automatically when the
compiled extension is unavailable or ``RTA_DOCKING_PURE_PYTHON`` is set.
"""
from __future__ import annotations

import numpy as np

STATUS_OPTIMAL = 0
STATUS_INFEASIBLE = 1
STATUS_MAX_ITER = 2

_STEP_TOL = 1e-12
_MULT_TOL = 1e-12
_FEAS_TOL = 1e-10
_PHASE1_REG = 1e-8
_PHASE1_ACCEPT = 1e-9


def _solve_small(M, rhs):
    """Gaussian elimination with partial pivoting; returns None when singular."""
    w = len(rhs)
    M = [list(row) for row in M]
    b = list(rhs)
    for col in range(w):
        piv = max(range(col, w), key=lambda r: abs(M[r][col]))
        if abs(M[piv][col]) < 1e-14:
            return None
        if piv != col:
            M[col], M[piv] = M[piv], M[col]
            b[col], b[piv] = b[piv], b[col]
        for r in range(col + 1, w):
            f = M[r][col] / M[col][col]
            if f != 0.0:
                for k in range(col, w):
                    M[r][k] -= f * M[col][k]
                b[r] -= f * b[col]
    out = [0.0] * w
    for r in range(w - 1, -1, -1):
        s = b[r]
        for k in range(r + 1, w):
            s -= M[r][k] * out[k]
        out[r] = s / M[r][r]
    return out


def _eq_step(hinv, g, C, working):
    """Minimize 1/2 p'Hp + g'p subject to C_W p = 0 (H diagonal)."""
    n = len(g)
    if not working:
        return [-hinv[i] * g[i] for i in range(n)], []
    rows = [C[j] for j in working]
    w = len(rows)
    M = [[sum(rows[a][i] * hinv[i] * rows[b][i] for i in range(n)) for b in range(w)] for a in range(w)]
    rhs = [sum(rows[a][i] * hinv[i] * g[i] for i in range(n)) for a in range(w)]
    lam = _solve_small(M, rhs)
    if lam is None:
        return None, None
    p = [hinv[i] * (sum(lam[a] * rows[a][i] for a in range(w)) - g[i]) for i in range(n)]
    return p, lam


def _active_set(hdiag, c, C, d, x, working, max_iter):
    """Primal active-set method for min 1/2 x'diag(h)x + c'x s.t. C x >= d from feasible x.

    Returns ``(x, working, lam, iterations, status)``.
    """
    n = len(x)
    m = len(d)
    hinv = [1.0 / h for h in hdiag]
    working = list(working)
    for it in range(1, max_iter + 1):
        g = [hdiag[i] * x[i] + c[i] for i in range(n)]
        p, lam = _eq_step(hinv, g, C, working)
        if p is None:
            # dependent working rows; drop the newest
            working.pop()
            continue
        # reduced-gradient test; scale-free when H is tiny (phase 1)
        pnorm = max(abs(hdiag[i] * p[i]) for i in range(n))
        if pnorm <= _STEP_TOL * (1.0 + max(abs(v) for v in g)):
            if not working:
                return x, working, lam, it, STATUS_OPTIMAL
            low = 0
            for a in range(1, len(lam)):
                if lam[a] < lam[low]:
                    low = a
            if lam[low] >= -_MULT_TOL:
                return x, working, lam, it, STATUS_OPTIMAL
            working.pop(low)
            continue
        alpha = 1.0
        block = -1
        for j in range(m):
            if j in working:
                continue
            cp = sum(C[j][i] * p[i] for i in range(n))
            if cp < -1e-15:
                slack = sum(C[j][i] * x[i] for i in range(n)) - d[j]
                step = max(slack, 0.0) / -cp
                if step < alpha:
                    alpha = step
                    block = j
        x = [x[i] + alpha * p[i] for i in range(n)]
        if block >= 0:
            working.append(block)
    g = [hdiag[i] * x[i] + c[i] for i in range(n)]
    _, lam = _eq_step(hinv, g, C, working)
    return x, working, lam or [], max_iter, STATUS_MAX_ITER


def qp_project(u_des, G, h, lower, upper, warm, max_iter):
    """Euclidean projection of ``u_des`` onto ``{G u + h >= 0, lower <= u <= upper}``.

    Returns ``(u, status, multipliers, active, iterations)``; multipliers cover
    the k barrier rows followed by the 3 lower and 3 upper box rows.
    """
    u_des = [float(v) for v in u_des]
    n = len(u_des)
    G = np.asarray(G, dtype=float).reshape(-1, n)
    k = G.shape[0]
    C = [list(map(float, row)) for row in G]
    d = [-float(v) for v in h]
    for i in range(n):
        row = [0.0] * n
        row[i] = 1.0
        C.append(row)
        d.append(float(lower[i]))
    for i in range(n):
        row = [0.0] * n
        row[i] = -1.0
        C.append(row)
        d.append(-float(upper[i]))
    m = len(d)

    def result(x, working, lam, iters, status):
        mult = [0.0] * m
        for a, j in enumerate(working):
            if a < len(lam):
                mult[j] = lam[a]
        return np.array(x), status, np.array(mult), sorted(working), iters

    # warm start: re-solve on the previous active set and accept if it is a KKT point
    warm = [j for j in warm if 0 <= j < m]
    if warm and len(warm) <= n:
        rows = [C[j] for j in warm]
        w = len(rows)
        M = [[sum(rows[a][i] * rows[b][i] for i in range(n)) for b in range(w)] for a in range(w)]
        rhs = [d[warm[a]] - sum(rows[a][i] * u_des[i] for i in range(n)) for a in range(w)]
        lam = _solve_small(M, rhs)
        if lam is not None and min(lam) >= -_MULT_TOL:
            x = [u_des[i] + sum(lam[a] * rows[a][i] for a in range(w)) for i in range(n)]
            if all(sum(C[j][i] * x[i] for i in range(n)) - d[j] >= -_FEAS_TOL for j in range(m)):
                return result(x, warm, lam, 0, STATUS_OPTIMAL)

    x0 = [min(max(u_des[i], lower[i]), upper[i]) for i in range(n)]
    worst = 0.0
    for j in range(k):
        norm = sum(v * v for v in C[j]) ** 0.5
        slack = sum(C[j][i] * x0[i] for i in range(n)) - d[j]
        if norm == 0.0:
            if slack < 0.0:
                return result(x0, [], [], 0, STATUS_INFEASIBLE)
            continue
        worst = max(worst, -slack / norm)
    used = 0
    if worst > _FEAS_TOL:
        # phase 1: minimize the largest normalized violation t over (u, t)
        C1, d1 = [], []
        for j in range(k):
            norm = sum(v * v for v in C[j]) ** 0.5
            if norm == 0.0:
                C1.append([0.0] * (n + 1))
                d1.append(-1.0)
                continue
            C1.append([v / norm for v in C[j]] + [1.0])
            d1.append(d[j] / norm)
        for j in range(k, m):
            C1.append(C[j] + [0.0])
            d1.append(d[j])
        C1.append([0.0] * n + [1.0])
        d1.append(-1.0)
        hd = [_PHASE1_REG] * (n + 1)
        c1 = [-_PHASE1_REG * v for v in x0] + [1.0]
        z, _, _, used, st = _active_set(hd, c1, C1, d1, x0 + [worst + 1.0], [], max_iter)
        if st != STATUS_OPTIMAL:
            return result(x0, [], [], used, st)
        if z[n] > _PHASE1_ACCEPT:
            return result(z[:n], [], [], used, STATUS_INFEASIBLE)
        x0 = z[:n]
    x, working, lam, iters, status = _active_set([1.0] * n, [-v for v in u_des], C, d, x0, [],
                                                 max(1, max_iter - used))
    return result(x, working, lam, iters + used, status)


def backup_rollout(x0, target, handover, K, A, B, flow, u_max, eps, dt, steps, want_sens):
    """Euler rollout of the NMT-tracking LQR, optionally with flow sensitivities.

    Returns ``(states, controls, sens, saturated)`` with ``steps + 1`` samples;
    ``controls[j]`` is the backup command evaluated at ``states[j]``.
    """
    x = np.array(x0, dtype=float)
    tgt = np.array(target, dtype=float)
    states = np.empty((steps + 1, 6))
    controls = np.empty((steps + 1, 3))
    saturated = np.zeros((steps + 1, 3), dtype=bool)
    sens = np.empty((steps + 1, 6, 6)) if want_sens else None
    D = np.eye(6)
    I6 = np.eye(6)
    for j in range(steps + 1):
        states[j] = x
        raw = -K @ (x - tgt)
        sat = np.abs(raw) > u_max
        u = np.clip(raw, -u_max, u_max)
        controls[j] = u
        saturated[j] = sat
        if want_sens:
            sens[j] = D
        if j == steps:
            break
        if not handover:
            e = x[0:3] - tgt[0:3]
            handover = bool(np.sqrt(e @ e) < eps)
        if handover:
            tgt = flow @ tgt
        if want_sens:
            Ks = np.where(sat[:, None], 0.0, K)
            D = (I6 + dt * (A - B @ Ks)) @ D
        x = x + dt * (A @ x + B @ u)
    return states, controls, sens, saturated
