"""Compiled inner loops of the 1D network solver.

All pressures inside the kernels are CGS (g cm^-1 s^-2) except the
Windkessel state, which is kept in mmHg like its R and C values.

Per-node geometry is packed in ``geo`` with rows
    0: A0 at nodes, 1: dA0/dx at nodes, 2: friction coefficient at nodes,
    3: A0 at half points, 4: dA0/dx at half points, 5: friction at half points
where half point ``j`` sits between nodes ``j`` and ``j + 1`` of the same vessel.
Per-vessel integer table ``vint`` has columns
    0: first node, 1: node count, 2: parent, 3: daughter 1, 4: daughter 2, 5: terminal slot
with -1 for "none".
"""

import math

import numpy as np
from numba import njit

MMHG = 1333.22

OK = 0
NOT_CONVERGED = 1
FAIL_AREA = -1
FAIL_CFL = -2
FAIL_JUNCTION = -3
FAIL_OUTLET = -4

NEWTON_MAXIT = 50


@njit(cache=True)
def pressure(A, A0, k43f, p0c):
    # 1 - sqrt(A0/A) written without cancellation near A = A0
    sA = math.sqrt(A)
    return p0c + k43f * (A - A0) / (sA * (sA + math.sqrt(A0)))


@njit(cache=True)
def dpressure(A, A0, k43f):
    return 0.5 * k43f * math.sqrt(A0) / (A * math.sqrt(A))


@njit(cache=True)
def wave_speed(A, A0, kk):
    return kk * math.sqrt(math.sqrt(A0 / A))


@njit(cache=True)
def phi(A, A0, kk):
    # integral of c/A from A0 to A, i.e. 4 kk (1 - (A0/A)^(1/4)) without cancellation
    sA, sA0 = math.sqrt(A), math.sqrt(A0)
    qA, qA0 = math.sqrt(sA), math.sqrt(sA0)
    return 4.0 * kk * (A - A0) / (qA * (sA + sA0) * (qA + qA0))


@njit(cache=True)
def momentum_source(A, q, A0, dA0, fr, k43f_rho):
    return -fr * q / A + dA0 * k43f_rho * (math.sqrt(A / A0) - 1.0)


@njit(cache=True)
def flux2(A, q, A0, k43f_rho):
    return q * q / A + k43f_rho * (math.sqrt(A0 * A) - A0)


@njit(cache=True)
def lw_interior(A, q, Anew, qnew, Ah, qh, lo, n, dx, dt, geo, k43f_rho):
    """Richtmyer two-step update of nodes lo+1 .. lo+n-2 of one vessel."""
    r = dt / dx
    for i in range(n - 1):
        j = lo + i
        Aa, qa, Ab, qb = A[j], q[j], A[j + 1], q[j + 1]
        F2a = flux2(Aa, qa, geo[0, j], k43f_rho)
        F2b = flux2(Ab, qb, geo[0, j + 1], k43f_rho)
        Sa = momentum_source(Aa, qa, geo[0, j], geo[1, j], geo[2, j], k43f_rho)
        Sb = momentum_source(Ab, qb, geo[0, j + 1], geo[1, j + 1], geo[2, j + 1], k43f_rho)
        Ah[j] = 0.5 * (Aa + Ab) - 0.5 * r * (qb - qa)
        qh[j] = 0.5 * (qa + qb) - 0.5 * r * (F2b - F2a) + 0.25 * dt * (Sa + Sb)
    for j in range(lo, lo + n - 1):
        if not Ah[j] > 0.0:
            return j
    for i in range(1, n - 1):
        j = lo + i
        F2l = flux2(Ah[j - 1], qh[j - 1], geo[3, j - 1], k43f_rho)
        F2r = flux2(Ah[j], qh[j], geo[3, j], k43f_rho)
        Sl = momentum_source(Ah[j - 1], qh[j - 1], geo[3, j - 1], geo[4, j - 1], geo[5, j - 1], k43f_rho)
        Sr = momentum_source(Ah[j], qh[j], geo[3, j], geo[4, j], geo[5, j], k43f_rho)
        Anew[j] = A[j] - r * (qh[j] - qh[j - 1])
        qnew[j] = q[j] - r * (F2r - F2l) + 0.5 * dt * (Sl + Sr)
    return -1


@njit(cache=True)
def _char_rate(A, q, A0, dA0, fr, kk, sign):
    """Rate of change of the forward (sign=+1) or backward (sign=-1) invariant."""
    u = q / A
    c = wave_speed(A, A0, kk)
    return -fr * u / A + dA0 * (kk * kk / math.sqrt(A0 * A) - sign * (c / A0) * (u + sign * c))


@njit(cache=True)
def outgoing_forward(A, q, jN, jM, dx, dt, geo, kk):
    """Forward invariant arriving at the right end node jN after one step."""
    uN = q[jN] / A[jN]
    cN = wave_speed(A[jN], geo[0, jN], kk)
    ratio = (uN + cN) * dt / dx
    WN = uN + phi(A[jN], geo[0, jN], kk)
    WM = q[jM] / A[jM] + phi(A[jM], geo[0, jM], kk)
    GN = _char_rate(A[jN], q[jN], geo[0, jN], geo[1, jN], geo[2, jN], kk, 1.0)
    GM = _char_rate(A[jM], q[jM], geo[0, jM], geo[1, jM], geo[2, jM], kk, 1.0)
    return WN - ratio * (WN - WM) + dt * (GN - ratio * (GN - GM))


@njit(cache=True)
def outgoing_backward(A, q, j0, j1, dx, dt, geo, kk):
    """Backward invariant arriving at the left end node j0 after one step."""
    u0 = q[j0] / A[j0]
    c0 = wave_speed(A[j0], geo[0, j0], kk)
    ratio = (c0 - u0) * dt / dx
    W0 = u0 - phi(A[j0], geo[0, j0], kk)
    W1 = q[j1] / A[j1] - phi(A[j1], geo[0, j1], kk)
    G0 = _char_rate(A[j0], q[j0], geo[0, j0], geo[1, j0], geo[2, j0], kk, -1.0)
    G1 = _char_rate(A[j1], q[j1], geo[0, j1], geo[1, j1], geo[2, j1], kk, -1.0)
    return W0 + ratio * (W1 - W0) + dt * (G0 + ratio * (G1 - G0))


@njit(cache=True)
def junction_newton(Wp, W1, W2, A0p, A01, A02, Ap, A1, A2, kk, k43f, p0c, out):
    """Solve flow conservation and pressure continuity at a bifurcation.

    ``Wp`` is the forward invariant reaching the parent end, ``W1``/``W2`` the
    backward invariants reaching the daughter starts. ``Ap, A1, A2`` are the
    initial guesses. Fills ``out`` with (Ap, qp, A1, q1, A2, q2, flow residual,
    max pressure residual in mmHg) and returns the iteration count, or -1.
    """
    for it in range(NEWTON_MAXIT):
        up = Wp - phi(Ap, A0p, kk)
        u1 = W1 + phi(A1, A01, kk)
        u2 = W2 + phi(A2, A02, kk)
        qp, q1, q2 = Ap * up, A1 * u1, A2 * u2
        Pp = pressure(Ap, A0p, k43f, p0c)
        P1 = pressure(A1, A01, k43f, p0c)
        P2 = pressure(A2, A02, k43f, p0c)
        f0 = qp - q1 - q2
        f1 = (Pp - P1) / MMHG
        f2 = (Pp - P2) / MMHG
        res_q = abs(f0)
        res_p = max(abs(f1), abs(f2))
        if res_q < 1e-13 * (1.0 + abs(qp)) and res_p < 1e-12:
            out[0], out[1], out[2], out[3], out[4], out[5] = Ap, qp, A1, q1, A2, q2
            out[6], out[7] = res_q, res_p
            return it
        a = up - wave_speed(Ap, A0p, kk)
        b = -(u1 + wave_speed(A1, A01, kk))
        c = -(u2 + wave_speed(A2, A02, kk))
        d = dpressure(Ap, A0p, k43f) / MMHG
        e = -dpressure(A1, A01, k43f) / MMHG
        g = -dpressure(A2, A02, k43f) / MMHG
        # J = [[a, b, c], [d, e, 0], [d, 0, g]]; eliminate the daughter rows
        r0, r1, r2 = -f0, -f1, -f2
        piv = a - b * d / e - c * d / g
        if piv == 0.0 or not math.isfinite(piv):
            return -1
        dAp = (r0 - b * r1 / e - c * r2 / g) / piv
        dA1 = (r1 - d * dAp) / e
        dA2 = (r2 - d * dAp) / g
        if max(abs(dAp) / Ap, abs(dA1) / A1, abs(dA2) / A2) < 1e-15:
            # rounding floor reached
            out[0], out[1], out[2], out[3], out[4], out[5] = Ap, qp, A1, q1, A2, q2
            out[6], out[7] = res_q, res_p
            return it
        lam = 1.0
        while (Ap + lam * dAp <= 0.0 or A1 + lam * dA1 <= 0.0 or A2 + lam * dA2 <= 0.0):
            lam *= 0.5
            if lam < 1e-8:
                return -1
        Ap += lam * dAp
        A1 += lam * dA1
        A2 += lam * dA2
        if not (math.isfinite(Ap) and math.isfinite(A1) and math.isfinite(A2)):
            return -1
    return -1


@njit(cache=True)
def windkessel_coeffs(pwk, q_old, R2, C, dt):
    """Trapezoidal update p_wk_new = a + b * q_new of dp/dt = (q - p/R2)/C."""
    if C <= 0.0:
        return 0.0, R2
    h = dt / (2.0 * C)
    den = 1.0 + h / R2
    return (pwk * (1.0 - h / R2) + h * q_old) / den, h / den


@njit(cache=True)
def outlet_newton(W, A0, A, R1, a, b, kk, k43f, p0c, out):
    """Solve P(A) - p0 = a + (b + R1) q(A) for the outlet area (pressures in mmHg)."""
    Rtot = b + R1
    for it in range(NEWTON_MAXIT):
        u = W - phi(A, A0, kk)
        qv = A * u
        res = (pressure(A, A0, k43f, p0c) - p0c) / MMHG - (a + Rtot * qv)
        if abs(res) < 1e-12:
            out[0], out[1], out[2] = A, qv, res
            return it
        dres = dpressure(A, A0, k43f) / MMHG - Rtot * (u - wave_speed(A, A0, kk))
        if dres == 0.0 or not math.isfinite(dres):
            return -1
        dA = -res / dres
        if abs(dA) < 1e-15 * A:
            out[0], out[1], out[2] = A, qv, res
            return it
        lam = 1.0
        while A + lam * dA <= 0.0:
            lam *= 0.5
            if lam < 1e-8:
                return -1
        A += lam * dA
    return -1


@njit(cache=True)
def spline_eval(x, coef, period, t):
    tm = t % period
    k = np.searchsorted(x, tm, side="right") - 1
    if k < 0:
        k = 0
    elif k >= coef.shape[1]:
        k = coef.shape[1] - 1
    s = tm - x[k]
    return ((coef[0, k] * s + coef[1, k]) * s + coef[2, k]) * s + coef[3, k]


@njit(cache=True)
def _sample_locations(A, q, vint, geo, loc_v, loc_pos, k43f, p0c, lp, lq):
    for m in range(loc_v.shape[0]):
        v = loc_v[m]
        lo = vint[v, 0]
        n = vint[v, 1]
        pos = loc_pos[m]
        i0 = int(math.floor(pos))
        if i0 >= n - 1:
            i0 = n - 2
        w = pos - i0
        j = lo + i0
        pa = pressure(A[j], geo[0, j], k43f, p0c)
        pb = pressure(A[j + 1], geo[0, j + 1], k43f, p0c)
        lp[m] = ((1.0 - w) * pa + w * pb) / MMHG
        lq[m] = (1.0 - w) * q[j] + w * q[j + 1]


@njit(cache=True)
def run(A, q, vint, vdx, geo, root, junctions, terminals, R1, R2, C, pwk,
        dt, period, kk, k43f, rho, p0c, cfl_max,
        spl_x, spl_c, loc_v, loc_pos, n_out, min_cycles, max_cycles, tol,
        out_p, out_q, istats, fstats):
    """Integrate whole cycles until the monitored pressure is periodic.

    ``out_p``/``out_q`` have shape (2, n_locations, n_out) and act as a double
    buffer; ``istats`` receives (status, fail vessel, fail step, cycles,
    slot of last complete cycle); ``fstats`` receives (max junction flow
    residual, max junction pressure residual, max CFL number, last cycle change).
    """
    k43f_rho = k43f / rho
    ntot = A.shape[0]
    Anew = A.copy()
    qnew = q.copy()
    Ah = np.zeros(ntot)
    qh = np.zeros(ntot)
    nloc = loc_v.shape[0]
    lp_older = np.zeros(nloc)
    lq_older = np.zeros(nloc)
    lp_old = np.zeros(nloc)
    lq_old = np.zeros(nloc)
    lp_new = np.zeros(nloc)
    lq_new = np.zeros(nloc)
    jout = np.zeros(8)
    wout = np.zeros(3)
    qterm = np.zeros(terminals.shape[0])
    for m in range(terminals.shape[0]):
        v = terminals[m]
        qterm[m] = q[vint[v, 0] + vint[v, 1] - 1]

    h_out = period / n_out
    _sample_locations(A, q, vint, geo, loc_v, loc_pos, k43f, p0c, lp_old, lq_old)
    slot = 0
    for m in range(nloc):
        out_p[slot, m, 0] = lp_old[m]
        out_q[slot, m, 0] = lq_old[m]
    sample = 1  # global sample counter; sample s sits at t = s * h_out
    cycle = 0
    t = 0.0
    step = 0
    max_res_q = 0.0
    max_res_p = 0.0
    max_cfl = 0.0
    worst = -1
    last_change = np.inf
    max_steps = int(max_cycles * period / dt) + 10

    while step < max_steps:
        # -- interior
        for v in range(vint.shape[0]):
            bad = lw_interior(A, q, Anew, qnew, Ah, qh, vint[v, 0], vint[v, 1], vdx[v], dt, geo, k43f_rho)
            if bad >= 0:
                istats[0], istats[1], istats[2] = FAIL_AREA, v, step
                return
        # -- inlet: mass conservation with the prescribed flow
        j = vint[root, 0]
        qin_half = spline_eval(spl_x, spl_c, period, t + 0.5 * dt)
        Anew[j] = A[j] - 2.0 * dt / vdx[root] * (qh[j] - qin_half)
        qnew[j] = spline_eval(spl_x, spl_c, period, t + dt)
        # -- junctions
        for m in range(junctions.shape[0]):
            p = junctions[m]
            d1 = vint[p, 3]
            d2 = vint[p, 4]
            jN = vint[p, 0] + vint[p, 1] - 1
            j1 = vint[d1, 0]
            j2 = vint[d2, 0]
            Wp = outgoing_forward(A, q, jN, jN - 1, vdx[p], dt, geo, kk)
            W1 = outgoing_backward(A, q, j1, j1 + 1, vdx[d1], dt, geo, kk)
            W2 = outgoing_backward(A, q, j2, j2 + 1, vdx[d2], dt, geo, kk)
            it = junction_newton(Wp, W1, W2, geo[0, jN], geo[0, j1], geo[0, j2],
                                 A[jN], A[j1], A[j2], kk, k43f, p0c, jout)
            if it < 0:
                istats[0], istats[1], istats[2] = FAIL_JUNCTION, p, step
                return
            Anew[jN], qnew[jN] = jout[0], jout[1]
            Anew[j1], qnew[j1] = jout[2], jout[3]
            Anew[j2], qnew[j2] = jout[4], jout[5]
            if jout[6] > max_res_q:
                max_res_q = jout[6]
            if jout[7] > max_res_p:
                max_res_p = jout[7]
        # -- Windkessel outlets
        for m in range(terminals.shape[0]):
            v = terminals[m]
            jN = vint[v, 0] + vint[v, 1] - 1
            W = outgoing_forward(A, q, jN, jN - 1, vdx[v], dt, geo, kk)
            a, b = windkessel_coeffs(pwk[m], qterm[m], R2[m], C[m], dt)
            it = outlet_newton(W, geo[0, jN], A[jN], R1[m], a, b, kk, k43f, p0c, wout)
            if it < 0:
                istats[0], istats[1], istats[2] = FAIL_OUTLET, v, step
                return
            Anew[jN], qnew[jN] = wout[0], wout[1]
            pwk[m] = a + b * wout[1]
            qterm[m] = wout[1]
        # -- health checks
        for v in range(vint.shape[0]):
            lo = vint[v, 0]
            for jj in range(lo, lo + vint[v, 1]):
                Aj = Anew[jj]
                if not (Aj > 0.0 and math.isfinite(qnew[jj])):
                    istats[0], istats[1], istats[2] = FAIL_AREA, v, step
                    return
                cfl = (abs(qnew[jj] / Aj) + wave_speed(Aj, geo[0, jj], kk)) * dt / vdx[v]
                if cfl > max_cfl:
                    max_cfl = cfl
                    worst = v
        if max_cfl > cfl_max:
            istats[0], istats[1], istats[2] = FAIL_CFL, worst, step
            fstats[2] = max_cfl
            return
        A, Anew = Anew, A
        q, qnew = qnew, q
        t_old = t
        step += 1
        t = step * dt
        # -- recording
        _sample_locations(A, q, vint, geo, loc_v, loc_pos, k43f, p0c, lp_new, lq_new)
        while sample * h_out <= t:
            ts = sample * h_out
            s = (ts - t_old) / dt
            i = sample % n_out
            if step >= 2:
                # quadratic through the last three steps
                wa, wb, wc = 0.5 * s * (s - 1.0), 1.0 - s * s, 0.5 * s * (s + 1.0)
            else:
                wa, wb, wc = 0.0, 1.0 - s, s
            for m in range(nloc):
                out_p[slot, m, i] = wa * lp_older[m] + wb * lp_old[m] + wc * lp_new[m]
                out_q[slot, m, i] = wa * lq_older[m] + wb * lq_old[m] + wc * lq_new[m]
            if i == n_out - 1:
                # cycle complete
                cycle += 1
                if cycle >= 2:
                    change = 0.0
                    for ii in range(n_out):
                        dd = abs(out_p[slot, 0, ii] - out_p[1 - slot, 0, ii])
                        if dd > change:
                            change = dd
                    last_change = change
                    if cycle >= min_cycles and change < tol:
                        istats[0], istats[3], istats[4] = OK, cycle, slot
                        fstats[0], fstats[1], fstats[2], fstats[3] = max_res_q, max_res_p, max_cfl, change
                        return
                if cycle >= max_cycles:
                    istats[0], istats[3], istats[4] = NOT_CONVERGED, cycle, slot
                    fstats[0], fstats[1], fstats[2], fstats[3] = max_res_q, max_res_p, max_cfl, last_change
                    return
                slot = 1 - slot
            sample += 1
        for m in range(nloc):
            lp_older[m] = lp_old[m]
            lq_older[m] = lq_old[m]
            lp_old[m] = lp_new[m]
            lq_old[m] = lq_new[m]
    istats[0], istats[3], istats[4] = NOT_CONVERGED, cycle, 1 - slot
    fstats[0], fstats[1], fstats[2], fstats[3] = max_res_q, max_res_p, max_cfl, last_change
