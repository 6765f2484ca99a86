# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: RK4 closed loop and the Poisson-clock agent system.

Both kernels share the packed parameter layout built by
``taskalloc.kernels.pack``; ``_fallback.py`` is the line-by-line twin.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, pow, exp, fabs, floor, fmax

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64

cdef double EXP_FLOOR = -745.0


cdef struct Params:
    int m
    int n
    int sat
    double M
    double* A
    double* R
    double* alpha
    double* beta
    double* lbar
    double* w
    double* G
    double* theta
    double* logtheta


cdef inline void rate(Params* P, double* q, double* x, double* out) noexcept nogil:
    cdef int i, j
    cdef double t, s, xj, b
    for i in range(P.m):
        if P.sat:
            t = tanh(0.5 * P.alpha[i] * q[i])
        else:
            t = q[i] / P.lbar[i]
        s = 0.0
        b = P.beta[i]
        for j in range(P.n):
            if P.A[i * P.n + j] != 0.0:
                xj = fmax(x[j], 0.0)
                if b == 1.0:
                    s += xj
                else:
                    s += pow(xj, b)
        out[i] = P.R[i] * t * s


cdef inline void target(Params* P, double* q, double eta, double* out) noexcept nogil:
    # M * softmax(log theta + G q / eta), zero where theta == 0
    cdef int i, k
    cdef double p, top = -1e308, tot = 0.0, e
    for i in range(P.n):
        p = 0.0
        for k in range(P.m):
            p += P.G[i * P.m + k] * q[k]
        out[i] = P.logtheta[i] + p / eta
        if P.theta[i] > 0.0 and out[i] > top:
            top = out[i]
    for i in range(P.n):
        if P.theta[i] > 0.0:
            e = out[i] - top
            if e < EXP_FLOOR:
                e = EXP_FLOOR
            out[i] = exp(e)
            tot += out[i]
        else:
            out[i] = 0.0
    for i in range(P.n):
        out[i] = P.M * out[i] / tot


cdef inline void field(Params* P, double* q, double* x, double eta, int pin_x,
                       double* dq, double* dx, double* F) noexcept nogil:
    cdef int i
    cdef double resid = 0.0, total = 0.0
    rate(P, q, x, F)
    for i in range(P.m):
        dq[i] = P.w[i] - F[i]
    if pin_x:
        for i in range(P.n):
            dx[i] = 0.0
        return
    target(P, q, eta, dx)
    for i in range(P.n):
        dx[i] -= x[i]
        resid += dx[i]
        total += x[i]
    # rounding residual goes to occupied strategies so empty ones keep dx_i = target_i >= 0
    for i in range(P.n):
        if total > 0.0:
            dx[i] -= resid * x[i] / total
        else:
            dx[i] -= resid / P.n


cdef inline double eta_at(double t, double[::1] eta_times, double[::1] eta_vals) noexcept nogil:
    cdef Py_ssize_t k, K = eta_times.shape[0]
    cdef double eta = eta_vals[0]
    for k in range(1, K):
        if eta_times[k] <= t:
            eta = eta_vals[k]
        else:
            break
    return eta


cdef Params make_params(int sat, double M, double[:, ::1] A, double[::1] R, double[::1] alpha,
                        double[::1] beta, double[::1] lbar, double[::1] w, double[:, ::1] G,
                        double[::1] theta, double[::1] logtheta):
    cdef Params P
    P.m = A.shape[0]
    P.n = A.shape[1]
    P.sat = sat
    P.M = M
    P.A = &A[0, 0]
    P.R = &R[0]
    P.alpha = &alpha[0]
    P.beta = &beta[0]
    P.lbar = &lbar[0]
    P.w = &w[0]
    P.G = &G[0, 0]
    P.theta = &theta[0]
    P.logtheta = &logtheta[0]
    return P


def integrate_closed_loop(int sat, double M, double[:, ::1] A, double[::1] R, double[::1] alpha,
                          double[::1] beta, double[::1] lbar, double[::1] w, double[:, ::1] G,
                          double[::1] theta, double[::1] logtheta,
                          double[::1] eta_times, double[::1] eta_vals,
                          double[::1] q0, double[::1] x0, double t0, double dt, long nsteps,
                          long stride, int pin_x, double qbound, double clamp_tol, double mass_tol,
                          double[::1] times_out, double[:, ::1] Q_out, double[:, ::1] X_out):
    """Fixed-step RK4 of the coupled system; see ``_fallback.integrate_closed_loop``."""
    cdef Params P = make_params(sat, M, A, R, alpha, beta, lbar, w, G, theta, logtheta)
    cdef int m = P.m, n = P.n, i
    cdef double[::1] q = np.array(q0, dtype=np.float64)
    cdef double[::1] x = np.array(x0, dtype=np.float64)
    cdef double[:, ::1] kq = np.zeros((4, m))
    cdef double[:, ::1] kx = np.zeros((4, n))
    cdef double[::1] qs = np.zeros(m)
    cdef double[::1] xs = np.zeros(n)
    cdef double[::1] F = np.zeros(m)
    cdef long step, rec = 0
    cdef double t, eta, h6 = dt / 6.0, worst_clamp = 0.0, worst_mass = 0.0, tot, qmax
    cdef int status = 0
    cdef long fail_step = -1
    cdef double fail_mag = 0.0

    with nogil:
        times_out[0] = t0
        for i in range(m):
            Q_out[0, i] = q[i]
        for i in range(n):
            X_out[0, i] = x[i]
        rec = 1
        for step in range(1, nsteps + 1):
            t = t0 + (step - 1) * dt
            eta = eta_at(t, eta_times, eta_vals)
            field(&P, &q[0], &x[0], eta, pin_x, &kq[0, 0], &kx[0, 0], &F[0])
            for i in range(m):
                qs[i] = q[i] + 0.5 * dt * kq[0, i]
            for i in range(n):
                xs[i] = x[i] + 0.5 * dt * kx[0, i]
            field(&P, &qs[0], &xs[0], eta, pin_x, &kq[1, 0], &kx[1, 0], &F[0])
            for i in range(m):
                qs[i] = q[i] + 0.5 * dt * kq[1, i]
            for i in range(n):
                xs[i] = x[i] + 0.5 * dt * kx[1, i]
            field(&P, &qs[0], &xs[0], eta, pin_x, &kq[2, 0], &kx[2, 0], &F[0])
            for i in range(m):
                qs[i] = q[i] + dt * kq[2, i]
            for i in range(n):
                xs[i] = x[i] + dt * kx[2, i]
            field(&P, &qs[0], &xs[0], eta, pin_x, &kq[3, 0], &kx[3, 0], &F[0])
            qmax = 0.0
            for i in range(m):
                q[i] = q[i] + h6 * (kq[0, i] + 2.0 * kq[1, i] + 2.0 * kq[2, i] + kq[3, i])
                if q[i] < 0.0:
                    if -q[i] > worst_clamp:
                        worst_clamp = -q[i]
                    if -q[i] > clamp_tol:
                        status = 1
                        fail_mag = -q[i]
                    q[i] = 0.0
                if q[i] > qmax:
                    qmax = q[i]
                if not (q[i] == q[i]):
                    status = 3
                    fail_mag = q[i]
            if qmax > qbound:
                status = 3
                fail_mag = qmax
            tot = 0.0
            for i in range(n):
                x[i] = x[i] + h6 * (kx[0, i] + 2.0 * kx[1, i] + 2.0 * kx[2, i] + kx[3, i])
                if x[i] < 0.0:
                    if -x[i] > mass_tol and status == 0:
                        status = 2
                        fail_mag = -x[i]
                    x[i] = 0.0
                tot += x[i]
            if fabs(tot - M) > worst_mass:
                worst_mass = fabs(tot - M)
            if fabs(tot - M) > mass_tol and status == 0:
                status = 2
                fail_mag = tot - M
            for i in range(n):
                x[i] = x[i] * (M / tot)
            if status != 0:
                fail_step = step
                break
            if step % stride == 0 or step == nsteps:
                times_out[rec] = t0 + step * dt
                for i in range(m):
                    Q_out[rec, i] = q[i]
                for i in range(n):
                    X_out[rec, i] = x[i]
                rec += 1
    return status, fail_step, fail_mag, worst_clamp, worst_mass, rec


cdef inline void rk4_q(Params* P, double* q, double* x, double h, double* k1, double* k2,
                       double* k3, double* k4, double* qs) noexcept nogil:
    cdef int i, m = P.m
    rate(P, q, x, k1)
    for i in range(m):
        k1[i] = P.w[i] - k1[i]
        qs[i] = q[i] + 0.5 * h * k1[i]
    rate(P, qs, x, k2)
    for i in range(m):
        k2[i] = P.w[i] - k2[i]
        qs[i] = q[i] + 0.5 * h * k2[i]
    rate(P, qs, x, k3)
    for i in range(m):
        k3[i] = P.w[i] - k3[i]
        qs[i] = q[i] + h * k3[i]
    rate(P, qs, x, k4)
    for i in range(m):
        k4[i] = P.w[i] - k4[i]
        q[i] = q[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


def integrate_agents(int sat, double M, double[:, ::1] A, double[::1] R, double[::1] alpha,
                     double[::1] beta, double[::1] lbar, double[::1] w, double[:, ::1] G,
                     double[::1] theta, double[::1] logtheta,
                     double[::1] eta_times, double[::1] eta_vals,
                     double[::1] q, i64[::1] counts, long N, double[::1] clock, i64[::1] cursor,
                     double t_end, double dt, double qbound, double clamp_tol,
                     double[::1] rec_times, double[::1] times_out, double[:, ::1] Q_out,
                     double[:, ::1] X_out, double[::1] gaps, double[::1] u_agent, double[::1] u_new):
    """Event loop of the finite population; see ``_fallback.integrate_agents``."""
    cdef Params P = make_params(sat, M, A, R, alpha, beta, lbar, w, G, theta, logtheta)
    cdef int m = P.m, n = P.n, i, j, inew
    cdef double[::1] x = np.zeros(n)
    cdef double[::1] pi = np.zeros(n)
    cdef double[:, ::1] k = np.zeros((5, m))
    cdef double t = clock[0], t_next = clock[1], goal, span, h, acc, thresh
    cdef long rec = cursor[0], draw = cursor[1], nsub, s, pick, cum
    cdef long nrec = rec_times.shape[0], ndraw = gaps.shape[0]
    cdef int status = 0

    with nogil:
        for i in range(n):
            x[i] = M * counts[i] / N
        while True:
            goal = t_next
            if goal > t_end:
                goal = t_end
            if rec < nrec and rec_times[rec] < goal:
                goal = rec_times[rec]
            span = goal - t
            if span > 0.0:
                nsub = <long> (span / dt)
                if nsub * dt < span:
                    nsub += 1
                h = span / nsub
                for s in range(nsub):
                    rk4_q(&P, &q[0], &x[0], h, &k[0, 0], &k[1, 0], &k[2, 0], &k[3, 0], &k[4, 0])
                    for i in range(m):
                        if q[i] < 0.0:
                            if -q[i] > clamp_tol:
                                status = -1
                            q[i] = 0.0
                        if q[i] > qbound or not (q[i] == q[i]):
                            status = -3
                    if status != 0:
                        break
                if status != 0:
                    break
            t = goal
            if rec < nrec and t == rec_times[rec]:
                times_out[rec] = t
                for i in range(m):
                    Q_out[rec, i] = q[i]
                for i in range(n):
                    X_out[rec, i] = x[i]
                rec += 1
                continue
            if t >= t_end:
                status = 0
                break
            # t == t_next: one revision event
            if draw >= ndraw:
                status = 1
                break
            target(&P, &q[0], eta_at(t, eta_times, eta_vals), &pi[0])
            pick = <long> floor(u_agent[draw] * N)
            if pick >= N:
                pick = N - 1
            cum = 0
            j = n - 1
            for i in range(n):
                cum += counts[i]
                if cum > pick:
                    j = i
                    break
            thresh = u_new[draw] * M
            acc = 0.0
            inew = -1
            for i in range(n):
                if pi[i] > 0.0:
                    inew = i
                    acc += pi[i]
                    if acc > thresh:
                        break
            counts[j] -= 1
            counts[inew] += 1
            x[j] = M * counts[j] / N
            x[inew] = M * counts[inew] / N
            t_next = t + gaps[draw] / N
            draw += 1
    clock[0] = t
    clock[1] = t_next
    cursor[0] = rec
    cursor[1] = draw
    return status
