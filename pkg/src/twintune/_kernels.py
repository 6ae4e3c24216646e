"""Compiled numeric core: single-track derivatives, RK4, the shooting OCP and
the closed-loop episode.

Everything here works on flat float64 arrays so numba can compile it with
``nogil=True``; the dataclass API in :mod:`twintune.plant`,
:mod:`twintune.controller` and :mod:`twintune.oracle` packs and unpacks.
"""

from math import atan, cos, isfinite, sin, sqrt, tan

import numpy as np
from numba import njit

GRAVITY = 9.81

# state layout
VX, VY, YAWRATE, S, W, TH, DELTA, TR = 0, 1, 2, 3, 4, 5, 6, 7
NX = 8
NU = 2
# error layout used by the stage cost: (vx - v_ref, vy, r, w, theta_dev, delta, tr)
NE = 7
ERR_STATE = np.array([VX, VY, YAWRATE, W, TH, DELTA, TR], dtype=np.int64)

# parameter layout
MASS, IZ, LF, LR, CF, CR, GAIN, DRAG, GRADE, BLEND_LO, BLEND_HI, MAX_STEER = range(12)
NP = 12

# model selectors
KINEMATIC, DYNAMIC, FUSED = 0, 1, 2

SINGULAR_TOL = 1e-6
FD_STEP = 1e-5
# finite-difference scale per state (step = FD_STEP * scale)
STATE_SCALE = np.array([5.0, 1.0, 1.0, 10.0, 1.0, 0.5, 0.5, 1.0])

CTRL_NMPC, CTRL_PID = 0, 1


@njit(cache=True, nogil=True)
def blend_weight(vx, lo, hi):
    if vx <= lo:
        return 0.0
    if vx >= hi:
        return 1.0
    t = (vx - lo) / (hi - lo)
    return t * t * (3.0 - 2.0 * t)


@njit(cache=True, nogil=True)
def longitudinal_accel(vx, tr, p):
    return (p[GAIN] * tr - p[DRAG] * vx * abs(vx) - p[MASS] * GRAVITY * p[GRADE]) / p[MASS]


@njit(cache=True, nogil=True)
def deriv_kinematic(x, u, p, kappa, out):
    wheelbase = p[LF] + p[LR]
    vx = x[VX]
    th = x[TH]
    den = 1.0 - x[W] * kappa
    if abs(den) < SINGULAR_TOL:
        out[:] = np.nan
        return
    sdot = vx * cos(th) / den
    ax = longitudinal_accel(vx, x[TR], p)
    td = tan(x[DELTA])
    cd = cos(x[DELTA])
    # time derivative of the kinematic-consistent (vy, r)
    lat = ax * td + vx * u[0] / (cd * cd)
    out[VX] = ax
    out[VY] = p[LR] / wheelbase * lat
    out[YAWRATE] = lat / wheelbase
    out[S] = sdot
    out[W] = vx * sin(th)
    out[TH] = vx * td / wheelbase - kappa * sdot
    out[DELTA] = u[0]
    out[TR] = u[1]


@njit(cache=True, nogil=True)
def deriv_dynamic(x, u, p, kappa, vx, out):
    """Linear-tyre single-track derivative evaluated at longitudinal speed ``vx``."""
    th = x[TH]
    vy = x[VY]
    r = x[YAWRATE]
    d = x[DELTA]
    den = 1.0 - x[W] * kappa
    if abs(den) < SINGULAR_TOL:
        out[:] = np.nan
        return
    alpha_f = d - atan((vy + p[LF] * r) / vx)
    alpha_r = -atan((vy - p[LR] * r) / vx)
    fyf = p[CF] * alpha_f
    fyr = p[CR] * alpha_r
    cd = cos(d)
    sdot = (vx * cos(th) - vy * sin(th)) / den
    out[VX] = longitudinal_accel(vx, x[TR], p)
    out[VY] = (fyf * cd + fyr) / p[MASS] - vx * r
    out[YAWRATE] = (p[LF] * fyf * cd - p[LR] * fyr) / p[IZ]
    out[S] = sdot
    out[W] = vx * sin(th) + vy * cos(th)
    out[TH] = r - kappa * sdot
    out[DELTA] = u[0]
    out[TR] = u[1]


@njit(cache=True, nogil=True)
def deriv(x, u, p, kappa, model, out, tmp):
    if model == KINEMATIC:
        deriv_kinematic(x, u, p, kappa, out)
    elif model == DYNAMIC:
        deriv_dynamic(x, u, p, kappa, x[VX], out)
    else:
        lam = blend_weight(x[VX], p[BLEND_LO], p[BLEND_HI])
        deriv_kinematic(x, u, p, kappa, out)
        if lam > 0.0:
            deriv_dynamic(x, u, p, kappa, max(x[VX], p[BLEND_LO]), tmp)
            for i in range(NX):
                out[i] = lam * tmp[i] + (1.0 - lam) * out[i]


@njit(cache=True, nogil=True)
def rk4(x, u, p, kappa, dt, model, out, ws):
    """One RK4 step followed by actuator saturation and the no-reverse clamp.

    ``ws`` is a (6, NX) scratch buffer.
    """
    k1 = ws[0]
    k2 = ws[1]
    k3 = ws[2]
    k4 = ws[3]
    tmp = ws[4]
    xs = ws[5]
    deriv(x, u, p, kappa, model, k1, tmp)
    for i in range(NX):
        xs[i] = x[i] + 0.5 * dt * k1[i]
    deriv(xs, u, p, kappa, model, k2, tmp)
    for i in range(NX):
        xs[i] = x[i] + 0.5 * dt * k2[i]
    deriv(xs, u, p, kappa, model, k3, tmp)
    for i in range(NX):
        xs[i] = x[i] + dt * k3[i]
    deriv(xs, u, p, kappa, model, k4, tmp)
    for i in range(NX):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    lim = p[MAX_STEER]
    out[DELTA] = min(max(out[DELTA], -lim), lim)
    out[TR] = min(max(out[TR], -1.0), 1.0)
    if out[VX] < 0.0:
        out[VX] = 0.0


# ---------------------------------------------------------------- path lookup


@njit(cache=True, nogil=True)
def path_index(ps, s):
    n = ps.shape[0]
    if s <= ps[0]:
        return 0, 0.0
    if s >= ps[n - 1]:
        return n - 2, 1.0
    i = np.searchsorted(ps, s, side="right") - 1
    if i > n - 2:
        i = n - 2
    t = (s - ps[i]) / (ps[i + 1] - ps[i])
    return i, t


@njit(cache=True, nogil=True)
def path_value(ps, vals, s):
    i, t = path_index(ps, s)
    return vals[i] + t * (vals[i + 1] - vals[i])


@njit(cache=True, nogil=True)
def path_slope(ps, vals, s):
    """d(vals)/ds of the piecewise-linear profile; zero outside the sampled range."""
    if s <= ps[0] or s >= ps[ps.shape[0] - 1]:
        return 0.0
    i, t = path_index(ps, s)
    return (vals[i + 1] - vals[i]) / (ps[i + 1] - ps[i])


@njit(cache=True, nogil=True)
def model_step(x, u, p, ps, pk, dt, out, ws):
    kappa = path_value(ps, pk, x[S])
    rk4(x, u, p, kappa, dt, FUSED, out, ws)


@njit(cache=True, nogil=True)
def model_deriv(x, u, p, ps, pk, out, tmp):
    kappa = path_value(ps, pk, x[S])
    deriv(x, u, p, kappa, FUSED, out, tmp)


@njit(cache=True, nogil=True)
def rk4_transition(F, G, dt, A, B, M1, M2):
    """Discrete (A, B) of one RK4 step for the linear system x' = F x + G u.

    A = I + dt F + dt^2/2 F^2 + dt^3/6 F^3 + dt^4/24 F^4 and
    B = (dt I + dt^2/2 F + dt^3/6 F^2 + dt^4/24 F^3) G, evaluated by Horner.
    """
    c4 = dt / 4.0
    c3 = dt / 3.0
    c2 = dt / 2.0
    # M1 = I + c4 F
    for a in range(NX):
        for b in range(NX):
            M1[a, b] = c4 * F[a, b]
        M1[a, a] += 1.0
    # M2 = I + c3 F M1
    for a in range(NX):
        for b in range(NX):
            acc = 0.0
            for c in range(NX):
                acc += F[a, c] * M1[c, b]
            M2[a, b] = c3 * acc
        M2[a, a] += 1.0
    # M1 = I + c2 F M2
    for a in range(NX):
        for b in range(NX):
            acc = 0.0
            for c in range(NX):
                acc += F[a, c] * M2[c, b]
            M1[a, b] = c2 * acc
        M1[a, a] += 1.0
    # A = I + dt F M1 ; B = dt M1 G
    for a in range(NX):
        for b in range(NX):
            acc = 0.0
            for c in range(NX):
                acc += F[a, c] * M1[c, b]
            A[a, b] = dt * acc
        A[a, a] += 1.0
        for j in range(NU):
            acc = 0.0
            for c in range(NX):
                acc += M1[a, c] * G[c, j]
            B[a, j] = dt * acc


# --------------------------------------------------------------------- OCP


@njit(cache=True, nogil=True)
def _objective(X, U, q, rw, ps, pv, xlo, xhi, dt_h, penalty):
    """Returns (stage cost, penalty cost) of a simulated trajectory."""
    n = U.shape[0]
    stage = 0.0
    pen = 0.0
    for k in range(n):
        for j in range(NU):
            stage += dt_h * rw[j] * U[k, j] * U[k, j]
        xk = X[k + 1]
        e0 = xk[VX] - path_value(ps, pv, xk[S])
        stage += dt_h * q[0] * e0 * e0
        for m in range(1, NE):
            v = xk[ERR_STATE[m]]
            stage += dt_h * q[m] * v * v
        for i in range(NX):
            if xk[i] > xhi[i]:
                v = xk[i] - xhi[i]
                pen += penalty * v * v
            elif xk[i] < xlo[i]:
                v = xk[i] - xlo[i]
                pen += penalty * v * v
    return stage, pen


@njit(cache=True, nogil=True)
def _simulate(x0, U, p, ps, pk, dt_h, X, ws):
    X[0] = x0
    for k in range(U.shape[0]):
        model_step(X[k], U[k], p, ps, pk, dt_h, X[k + 1], ws)
    for k in range(X.shape[0]):
        for i in range(NX):
            if not isfinite(X[k, i]):
                return False
    return True


@njit(cache=True, nogil=True)
def _cholesky_solve(H, g, free, jitter):
    """Solve H[f,f] d = -g[f] on the free index set; zeros elsewhere."""
    idx = np.nonzero(free)[0]
    m = idx.shape[0]
    d = np.zeros(g.shape[0])
    if m == 0:
        return d, True
    A = np.empty((m, m))
    b = np.empty(m)
    for a in range(m):
        b[a] = -g[idx[a]]
        for c in range(m):
            A[a, c] = H[idx[a], idx[c]]
        A[a, a] += jitter
    # in-place Cholesky
    L = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            acc = A[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                if acc <= 0.0:
                    return d, False
                L[i, i] = sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    y = np.empty(m)
    for i in range(m):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * y[k]
        y[i] = acc / L[i, i]
    z = np.empty(m)
    for i in range(m - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, m):
            acc -= L[k, i] * z[k]
        z[i] = acc / L[i, i]
    for a in range(m):
        d[idx[a]] = z[a]
    return d, True


@njit(cache=True, nogil=True)
def ocp_solve(x0, U, q, rw, p, ps, pk, pv, xlo, xhi, ulo, uhi, dt_h, iters, penalty, X, trace):
    """Projected Gauss-Newton single shooting.

    ``U`` holds the initial guess on entry and the solution on exit; ``X`` the
    predicted states (N+1 rows). ``trace[i]`` receives the accepted objective
    after iteration i (``trace[0]`` is the initial guess). Returns
    ``(stage_cost, status)`` with status 0 on success and 1 when no finite
    candidate exists.
    """
    n = U.shape[0]
    nv = NU * n
    ws = np.empty((6, NX))
    for k in range(n):
        for j in range(NU):
            U[k, j] = min(max(U[k, j], ulo[j]), uhi[j])
    ok = _simulate(x0, U, p, ps, pk, dt_h, X, ws)
    if not ok:
        U[:, :] = 0.0
        ok = _simulate(x0, U, p, ps, pk, dt_h, X, ws)
        if not ok:
            return np.inf, 1
    stage, pen = _objective(X, U, q, rw, ps, pv, xlo, xhi, dt_h, penalty)
    f = stage + pen
    if not isfinite(f):
        return np.inf, 1
    for i in range(trace.shape[0]):
        trace[i] = np.nan
    trace[0] = f

    A = np.empty((n, NX, NX))
    B = np.empty((n, NX, NU))
    xp = np.empty(NX)
    xm = np.empty(NX)
    up = np.empty(NU)
    fp = np.empty(NX)
    fm = np.empty(NX)
    Sens = np.zeros((NX, nv))
    H = np.empty((nv, nv))
    g = np.empty(nv)
    row = np.empty(nv)
    Uc = np.empty_like(U)
    Xc = np.empty_like(X)
    half_u = np.empty(NU)
    for j in range(NU):
        half_u[j] = 0.5 * (uhi[j] - ulo[j])
    free = np.empty(nv, dtype=np.bool_)
    F = np.empty((NX, NX))
    G = np.empty((NX, NU))
    M1 = np.empty((NX, NX))
    M2 = np.empty((NX, NX))

    for it in range(iters):
        # stage Jacobians: central differences of the vector field on
        # normalized variables, mapped through the RK4 transition polynomial
        for k in range(n):
            for i in range(NX):
                h = FD_STEP * STATE_SCALE[i]
                xp[:] = X[k]
                xm[:] = X[k]
                xp[i] += h
                xm[i] -= h
                model_deriv(xp, U[k], p, ps, pk, fp, ws[0])
                model_deriv(xm, U[k], p, ps, pk, fm, ws[0])
                for a in range(NX):
                    F[a, i] = (fp[a] - fm[a]) / (2.0 * h)
            for j in range(NU):
                h = FD_STEP * half_u[j]
                up[:] = U[k]
                up[j] += h
                model_deriv(X[k], up, p, ps, pk, fp, ws[0])
                up[j] -= 2.0 * h
                model_deriv(X[k], up, p, ps, pk, fm, ws[0])
                for a in range(NX):
                    G[a, j] = (fp[a] - fm[a]) / (2.0 * h)
            rk4_transition(F, G, dt_h, A[k], B[k], M1, M2)

        # condensed Gauss-Newton system
        H[:, :] = 0.0
        g[:] = 0.0
        Sens[:, :] = 0.0
        for k in range(n):
            ncol = NU * (k + 1)
            # Sens <- A_k Sens + B_k E_k
            for c in range(NU * k):
                for a in range(NX):
                    acc = 0.0
                    for b in range(NX):
                        acc += A[k, a, b] * Sens[b, c]
                    row[a] = acc
                for a in range(NX):
                    Sens[a, c] = row[a]
            for j in range(NU):
                for a in range(NX):
                    Sens[a, NU * k + j] = B[k, a, j]
            xk = X[k + 1]
            slope = path_slope(ps, pv, xk[S])
            # tracking residuals
            for m in range(NE):
                wgt = dt_h * q[m]
                if wgt == 0.0:
                    continue
                si = ERR_STATE[m]
                if m == 0:
                    e = xk[VX] - path_value(ps, pv, xk[S])
                    for c in range(ncol):
                        row[c] = Sens[VX, c] - slope * Sens[S, c]
                else:
                    e = xk[si]
                    for c in range(ncol):
                        row[c] = Sens[si, c]
                for c in range(ncol):
                    g[c] += wgt * row[c] * e
                    rc = wgt * row[c]
                    for c2 in range(c + 1):
                        H[c, c2] += rc * row[c2]
            # soft state box
            for i in range(NX):
                v = 0.0
                if xk[i] > xhi[i]:
                    v = xk[i] - xhi[i]
                elif xk[i] < xlo[i]:
                    v = xk[i] - xlo[i]
                if v != 0.0:
                    for c in range(ncol):
                        g[c] += penalty * Sens[i, c] * v
                        rc = penalty * Sens[i, c]
                        for c2 in range(c + 1):
                            H[c, c2] += rc * Sens[i, c2]
            for j in range(NU):
                c = NU * k + j
                H[c, c] += dt_h * rw[j]
                g[c] += dt_h * rw[j] * U[k, j]
        diag_mean = 0.0
        for c in range(nv):
            for c2 in range(c):
                H[c2, c] = H[c, c2]
            diag_mean += H[c, c]
        diag_mean /= nv

        # projected Newton: freeze variables pinned at a bound by the gradient
        for k in range(n):
            for j in range(NU):
                c = NU * k + j
                at_lo = U[k, j] <= ulo[j] and g[c] > 0.0
                at_hi = U[k, j] >= uhi[j] and g[c] < 0.0
                free[c] = not (at_lo or at_hi)
        step, solved = _cholesky_solve(H, g, free, 1e-10 * diag_mean + 1e-300)
        if not solved:
            break

        accepted = False
        alpha = 1.0
        for _ in range(6):
            for k in range(n):
                for j in range(NU):
                    v = U[k, j] + alpha * step[NU * k + j]
                    Uc[k, j] = min(max(v, ulo[j]), uhi[j])
            if _simulate(x0, Uc, p, ps, pk, dt_h, Xc, ws):
                st, pn = _objective(Xc, Uc, q, rw, ps, pv, xlo, xhi, dt_h, penalty)
                fc = st + pn
                if fc < f:
                    U[:, :] = Uc
                    X[:, :] = Xc
                    f = fc
                    stage = st
                    accepted = True
                    break
            alpha *= 0.5
        if it + 1 < trace.shape[0]:
            trace[it + 1] = f
        if not accepted:
            break
    return stage, 0


# ---------------------------------------------------------- closed-loop run


@njit(cache=True, nogil=True)
def closed_loop(ctrl_kind, gains, q, rw, model_p, plant_p, delay_steps,
                ps, pk, pv, w_bound, x0, n_steps, dt,
                noise_in, noise_out,
                n_h, dt_h, iters, warm_start, penalty, xlo, xhi, ulo, uhi,
                out_y, out_x, out_u, out_J):
    """Run one episode; returns the number of completed samples.

    ``out_y[k] = (vx_meas - v_ref, w_meas, J*)``. Samples after a divergence
    are padded with the last recorded row.
    """
    x = x0.copy()
    ws = np.empty((6, NX))
    xn = np.empty(NX)
    xm = np.empty(NX)
    U = np.zeros((n_h, NU))
    Ushift = np.zeros((n_h, NU))
    X = np.empty((n_h + 1, NX))
    trace = np.empty(iters + 1)
    u = np.zeros(NU)
    ua = np.zeros(NU)
    fifo = np.zeros(max(delay_steps, 1))
    prev_u = np.zeros(NU)
    prev_J = 0.0
    integ = np.zeros(2)
    prev_err = np.zeros(2)
    have_prev = False
    frac = dt / dt_h
    limit = 10.0 * w_bound
    done = n_steps
    for k in range(n_steps):
        xm[:] = x
        xm[W] += noise_out[k, 0]
        xm[VX] += noise_out[k, 1]
        xm[VY] += noise_out[k, 2]
        xm[YAWRATE] += noise_out[k, 3]
        xm[TH] += noise_out[k, 4]
        vref = path_value(ps, pv, x[S])
        if ctrl_kind == CTRL_NMPC:
            if warm_start and k > 0:
                # shift the previous plan by one control period
                for i in range(n_h):
                    t = i + frac
                    i0 = int(t)
                    a = t - i0
                    if i0 >= n_h - 1:
                        Ushift[i, 0] = U[n_h - 1, 0]
                        Ushift[i, 1] = U[n_h - 1, 1]
                    else:
                        Ushift[i, 0] = (1 - a) * U[i0, 0] + a * U[i0 + 1, 0]
                        Ushift[i, 1] = (1 - a) * U[i0, 1] + a * U[i0 + 1, 1]
                U[:, :] = Ushift
            elif not warm_start:
                U[:, :] = 0.0
            J, status = ocp_solve(xm, U, q, rw, model_p, ps, pk, pv, xlo, xhi,
                                  ulo, uhi, dt_h, iters, penalty, X, trace)
            if status == 0:
                u[0] = U[0, 0]
                u[1] = U[0, 1]
            else:
                u[:] = prev_u
                J = prev_J
                U[:, :] = 0.0
        else:
            err_lat = xm[W]
            err_lon = xm[VX] - vref
            if have_prev:
                d_lat = (err_lat - prev_err[0]) / dt
                d_lon = (err_lon - prev_err[1]) / dt
            else:
                d_lat = 0.0
                d_lon = 0.0
            integ[0] += err_lat * dt
            integ[1] += err_lon * dt
            u[0] = -(gains[0] * err_lat + gains[1] * integ[0] + gains[2] * d_lat)
            u[1] = -(gains[3] * err_lon + gains[4] * integ[1] + gains[5] * d_lon)
            for j in range(NU):
                u[j] = min(max(u[j], ulo[j]), uhi[j])
            prev_err[0] = err_lat
            prev_err[1] = err_lon
            have_prev = True
            J = 0.0
        prev_u[:] = u
        prev_J = J

        out_y[k, 0] = xm[VX] - vref
        out_y[k, 1] = xm[W]
        out_y[k, 2] = J
        out_x[k] = x
        out_u[k] = u
        out_J[k] = J

        ua[0] = u[0] + noise_in[k, 0]
        ua[1] = u[1] + noise_in[k, 1]
        if delay_steps > 0:
            delayed = fifo[0]
            for i in range(delay_steps - 1):
                fifo[i] = fifo[i + 1]
            fifo[delay_steps - 1] = ua[0]
            ua[0] = delayed
        model_step(x, ua, plant_p, ps, pk, dt, xn, ws)
        x[:] = xn
        diverged = False
        for i in range(NX):
            if not isfinite(x[i]):
                diverged = True
        if abs(x[W]) > limit:
            diverged = True
        if diverged:
            done = k + 1
            for kk in range(k + 1, n_steps):
                out_y[kk] = out_y[k]
                out_x[kk] = out_x[k]
                out_u[kk] = out_u[k]
                out_J[kk] = out_J[k]
            break
    return done
