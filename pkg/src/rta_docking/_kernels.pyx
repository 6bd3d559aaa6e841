# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: dense active-set QP projection and backup rollouts.

Same signatures and semantics as ``_kernels_py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()

cdef enum:
    NMAX = 4
    WMAX = 4

cdef int STATUS_OPTIMAL_C = 0
cdef int STATUS_INFEASIBLE_C = 1
cdef int STATUS_MAX_ITER_C = 2
STATUS_OPTIMAL = 0
STATUS_INFEASIBLE = 1
STATUS_MAX_ITER = 2

cdef double STEP_TOL = 1e-12
cdef double MULT_TOL = 1e-12
cdef double FEAS_TOL = 1e-10
cdef double PHASE1_REG = 1e-8
cdef double PHASE1_ACCEPT = 1e-9


cdef bint _solve_small(double[WMAX][WMAX] M, double* b, int w, double* out) nogil:
    cdef int col, r, k, piv
    cdef double f, tmp, s
    for col in range(w):
        piv = col
        for r in range(col + 1, w):
            if fabs(M[r][col]) > fabs(M[piv][col]):
                piv = r
        if fabs(M[piv][col]) < 1e-14:
            return False
        if piv != col:
            for k in range(w):
                tmp = M[col][k]
                M[col][k] = M[piv][k]
                M[piv][k] = tmp
            tmp = b[col]
            b[col] = b[piv]
            b[piv] = tmp
        for r in range(col + 1, w):
            f = M[r][col] / M[col][col]
            if f != 0.0:
                for k in range(col, w):
                    M[r][k] -= f * M[col][k]
                b[r] -= f * b[col]
    for r in range(w - 1, -1, -1):
        s = b[r]
        for k in range(r + 1, w):
            s -= M[r][k] * out[k]
        out[r] = s / M[r][r]
    return True


cdef bint _eq_step(int n, double* hinv, double* g, double[:, ::1] C, int* working, int w,
                   double* p, double* lam) nogil:
    cdef double M[WMAX][WMAX]
    cdef double rhs[WMAX]
    cdef int a, b, i
    cdef double s
    if w == 0:
        for i in range(n):
            p[i] = -hinv[i] * g[i]
        return True
    for a in range(w):
        for b in range(w):
            s = 0.0
            for i in range(n):
                s += C[working[a], i] * hinv[i] * C[working[b], i]
            M[a][b] = s
        s = 0.0
        for i in range(n):
            s += C[working[a], i] * hinv[i] * g[i]
        rhs[a] = s
    if not _solve_small(M, rhs, w, lam):
        return False
    for i in range(n):
        s = 0.0
        for a in range(w):
            s += lam[a] * C[working[a], i]
        p[i] = hinv[i] * (s - g[i])
    return True


cdef int _active_set(int n, double* hdiag, double* c, double[:, ::1] C, double[::1] d,
                     double* x, int* working, int* w_out, double* lam, int max_iter,
                     int* iters) nogil:
    cdef int m = d.shape[0]
    cdef double hinv[NMAX]
    cdef double g[NMAX]
    cdef double p[NMAX]
    cdef int w = w_out[0]
    cdef int it, i, j, a, low, block
    cdef double pnorm, xnorm, alpha, cp, slack, step
    cdef bint inw
    for i in range(n):
        hinv[i] = 1.0 / hdiag[i]
    for it in range(1, max_iter + 1):
        for i in range(n):
            g[i] = hdiag[i] * x[i] + c[i]
        if not _eq_step(n, hinv, g, C, working, w, p, lam):
            w -= 1
            continue
        pnorm = 0.0
        xnorm = 0.0
        for i in range(n):
            if fabs(hdiag[i] * p[i]) > pnorm:
                pnorm = fabs(hdiag[i] * p[i])
            if fabs(g[i]) > xnorm:
                xnorm = fabs(g[i])
        if pnorm <= STEP_TOL * (1.0 + xnorm):
            if w == 0:
                w_out[0] = w
                iters[0] = it
                return STATUS_OPTIMAL_C
            low = 0
            for a in range(1, w):
                if lam[a] < lam[low]:
                    low = a
            if lam[low] >= -MULT_TOL:
                w_out[0] = w
                iters[0] = it
                return STATUS_OPTIMAL_C
            for a in range(low, w - 1):
                working[a] = working[a + 1]
            w -= 1
            continue
        alpha = 1.0
        block = -1
        for j in range(m):
            inw = False
            for a in range(w):
                if working[a] == j:
                    inw = True
                    break
            if inw:
                continue
            cp = 0.0
            for i in range(n):
                cp += C[j, i] * p[i]
            if cp < -1e-15:
                slack = -d[j]
                for i in range(n):
                    slack += C[j, i] * x[i]
                if slack < 0.0:
                    slack = 0.0
                step = slack / -cp
                if step < alpha:
                    alpha = step
                    block = j
        for i in range(n):
            x[i] += alpha * p[i]
        if block >= 0 and w < WMAX:
            working[w] = block
            w += 1
    for i in range(n):
        g[i] = hdiag[i] * x[i] + c[i]
    if not _eq_step(n, hinv, g, C, working, w, p, lam):
        for a in range(w):
            lam[a] = 0.0
    w_out[0] = w
    iters[0] = max_iter
    return STATUS_MAX_ITER_C


cdef list _sorted_working(int* working, int w):
    cdef int a
    out = []
    for a in range(w):
        out.append(working[a])
    out.sort()
    return out


def qp_project(u_des, G, h, lower, upper, warm, int max_iter):
    cdef int n = 3
    cdef double[:, ::1] Gv = np.ascontiguousarray(np.asarray(G, dtype=np.float64).reshape(-1, 3))
    cdef int k = Gv.shape[0]
    cdef int m = k + 2 * n
    cdef double[:, ::1] C = np.zeros((m, n))
    cdef double[::1] d = np.empty(m)
    cdef double[::1] hv = np.ascontiguousarray(h, dtype=np.float64).reshape(-1)
    cdef double[::1] ud = np.ascontiguousarray(u_des, dtype=np.float64)
    cdef double lo[3]
    cdef double hi[3]
    cdef double x[NMAX]
    cdef double lam[WMAX]
    cdef int working[WMAX]
    cdef int w = 0, iters = 0, used = 0, status, i, j, a, b
    cdef double M[WMAX][WMAX]
    cdef double rhs[WMAX]
    cdef double s, norm, slack, worst
    cdef bint ok
    for i in range(n):
        lo[i] = lower[i]
        hi[i] = upper[i]
    for j in range(k):
        for i in range(n):
            C[j, i] = Gv[j, i]
        d[j] = -hv[j]
    for i in range(n):
        C[k + i, i] = 1.0
        d[k + i] = lo[i]
        C[k + n + i, i] = -1.0
        d[k + n + i] = -hi[i]

    mult = np.zeros(m)
    cdef double[::1] mv = mult

    warm_list = [int(j) for j in warm if 0 <= int(j) < m]
    if 0 < len(warm_list) <= n:
        w = len(warm_list)
        for a in range(w):
            working[a] = warm_list[a]
        for a in range(w):
            for b in range(w):
                s = 0.0
                for i in range(n):
                    s += C[working[a], i] * C[working[b], i]
                M[a][b] = s
            s = d[working[a]]
            for i in range(n):
                s -= C[working[a], i] * ud[i]
            rhs[a] = s
        if _solve_small(M, rhs, w, lam):
            ok = True
            for a in range(w):
                if lam[a] < -MULT_TOL:
                    ok = False
            if ok:
                for i in range(n):
                    s = ud[i]
                    for a in range(w):
                        s += lam[a] * C[working[a], i]
                    x[i] = s
                for j in range(m):
                    slack = -d[j]
                    for i in range(n):
                        slack += C[j, i] * x[i]
                    if slack < -FEAS_TOL:
                        ok = False
                        break
            if ok:
                for a in range(w):
                    mv[working[a]] = lam[a]
                return (np.array([x[0], x[1], x[2]]), STATUS_OPTIMAL_C, mult,
                        _sorted_working(working, w), 0)
        w = 0

    for i in range(n):
        x[i] = min(max(ud[i], lo[i]), hi[i])
    worst = 0.0
    for j in range(k):
        norm = 0.0
        slack = -d[j]
        for i in range(n):
            norm += C[j, i] * C[j, i]
            slack += C[j, i] * x[i]
        norm = sqrt(norm)
        if norm == 0.0:
            if slack < 0.0:
                return (np.array([x[0], x[1], x[2]]), STATUS_INFEASIBLE_C, mult, [], 0)
            continue
        if -slack / norm > worst:
            worst = -slack / norm

    cdef double[:, ::1] C1
    cdef double[::1] d1
    cdef double hd[NMAX]
    cdef double c1[NMAX]
    cdef double z[NMAX]
    if worst > FEAS_TOL:
        C1 = np.zeros((m + 1, n + 1))
        d1 = np.empty(m + 1)
        for j in range(k):
            norm = 0.0
            for i in range(n):
                norm += C[j, i] * C[j, i]
            norm = sqrt(norm)
            if norm == 0.0:
                d1[j] = -1.0
                continue
            for i in range(n):
                C1[j, i] = C[j, i] / norm
            C1[j, n] = 1.0
            d1[j] = d[j] / norm
        for j in range(k, m):
            for i in range(n):
                C1[j, i] = C[j, i]
            d1[j] = d[j]
        C1[m, n] = 1.0
        d1[m] = -1.0
        for i in range(n):
            hd[i] = PHASE1_REG
            c1[i] = -PHASE1_REG * x[i]
            z[i] = x[i]
        hd[n] = PHASE1_REG
        c1[n] = 1.0
        z[n] = worst + 1.0
        w = 0
        status = _active_set(n + 1, hd, c1, C1, d1, z, working, &w, lam, max_iter, &used)
        if status != STATUS_OPTIMAL_C:
            return (np.array([x[0], x[1], x[2]]), status, mult, [], used)
        if z[n] > PHASE1_ACCEPT:
            return (np.array([z[0], z[1], z[2]]), STATUS_INFEASIBLE_C, mult, [], used)
        for i in range(n):
            x[i] = z[i]

    cdef double hd2[NMAX]
    cdef double c2[NMAX]
    for i in range(n):
        hd2[i] = 1.0
        c2[i] = -ud[i]
    w = 0
    status = _active_set(n, hd2, c2, C, d, x, working, &w, lam, max(1, max_iter - used), &iters)
    for a in range(w):
        mv[working[a]] = lam[a]
    return (np.array([x[0], x[1], x[2]]), status, mult,
            _sorted_working(working, w), iters + used)


def backup_rollout(x0, target, bint handover, K, A, B, flow, double u_max, double eps,
                   double dt, int steps, bint want_sens):
    cdef double[:, ::1] Kv = np.ascontiguousarray(K, dtype=np.float64)
    cdef double[:, ::1] Av = np.ascontiguousarray(A, dtype=np.float64)
    cdef double[:, ::1] Bv = np.ascontiguousarray(B, dtype=np.float64)
    cdef double[:, ::1] Fv = np.ascontiguousarray(flow, dtype=np.float64)
    states_arr = np.empty((steps + 1, 6))
    controls_arr = np.empty((steps + 1, 3))
    sat_arr = np.zeros((steps + 1, 3), dtype=np.uint8)
    cdef double[:, ::1] states = states_arr
    cdef double[:, ::1] controls = controls_arr
    cdef unsigned char[:, ::1] satv = sat_arr
    cdef double[:, :, ::1] sens
    sens_arr = None
    if want_sens:
        sens_arr = np.empty((steps + 1, 6, 6))
        sens = sens_arr
    cdef double x[6]
    cdef double xn[6]
    cdef double tgt[6]
    cdef double tn[6]
    cdef double u[3]
    cdef double D[6][6]
    cdef double Dn[6][6]
    cdef double J[6][6]
    cdef double raw, s, e0, e1, e2
    cdef int i, j, r, q, t
    for i in range(6):
        x[i] = x0[i]
        tgt[i] = target[i]
        for r in range(6):
            D[i][r] = 1.0 if i == r else 0.0
    for j in range(steps + 1):
        for i in range(6):
            states[j, i] = x[i]
        for r in range(3):
            raw = 0.0
            for i in range(6):
                raw -= Kv[r, i] * (x[i] - tgt[i])
            if raw > u_max:
                u[r] = u_max
                satv[j, r] = 1
            elif raw < -u_max:
                u[r] = -u_max
                satv[j, r] = 1
            else:
                u[r] = raw
            controls[j, r] = u[r]
        if want_sens:
            for i in range(6):
                for r in range(6):
                    sens[j, i, r] = D[i][r]
        if j == steps:
            break
        if not handover:
            e0 = x[0] - tgt[0]
            e1 = x[1] - tgt[1]
            e2 = x[2] - tgt[2]
            handover = sqrt(e0 * e0 + e1 * e1 + e2 * e2) < eps
        if handover:
            for i in range(6):
                s = 0.0
                for r in range(6):
                    s += Fv[i, r] * tgt[r]
                tn[i] = s
            for i in range(6):
                tgt[i] = tn[i]
        if want_sens:
            for i in range(6):
                for r in range(6):
                    s = Av[i, r]
                    for q in range(3):
                        if not satv[j, q]:
                            s -= Bv[i, q] * Kv[q, r]
                    J[i][r] = (1.0 if i == r else 0.0) + dt * s
            for i in range(6):
                for r in range(6):
                    s = 0.0
                    for t in range(6):
                        s += J[i][t] * D[t][r]
                    Dn[i][r] = s
            for i in range(6):
                for r in range(6):
                    D[i][r] = Dn[i][r]
        for i in range(6):
            s = 0.0
            for r in range(6):
                s += Av[i, r] * x[r]
            for q in range(3):
                s += Bv[i, q] * u[q]
            xn[i] = x[i] + dt * s
        for i in range(6):
            x[i] = xn[i]
    return states_arr, controls_arr, sens_arr, sat_arr.astype(bool)
