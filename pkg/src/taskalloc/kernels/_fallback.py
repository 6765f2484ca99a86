"""Pure Python/NumPy twin of ``_core.pyx``; same signatures, same algorithm."""

import math

import numpy as np

EXP_FLOOR = -745.0


class _Params:
    __slots__ = ("m", "n", "sat", "M", "A", "R", "alpha", "beta", "lbar", "w", "G", "theta",
                 "logtheta", "pos", "beta_one")

    def __init__(self, sat, M, A, R, alpha, beta, lbar, w, G, theta, logtheta):
        self.m, self.n = A.shape
        self.sat = sat
        self.M = M
        self.A = np.asarray(A)
        self.R = np.asarray(R)
        self.alpha = np.asarray(alpha)
        self.beta = np.asarray(beta)
        self.lbar = np.asarray(lbar)
        self.w = np.asarray(w)
        self.G = np.asarray(G)
        self.theta = np.asarray(theta)
        self.logtheta = np.asarray(logtheta)
        self.pos = self.theta > 0
        self.beta_one = bool(np.all(self.beta == 1.0))


def _rate(P, q, x):
    t = np.tanh(0.5 * P.alpha * q) if P.sat else q / P.lbar
    xp = np.maximum(x, 0.0)
    if P.beta_one:
        s = P.A @ xp
    else:
        s = np.sum(np.where(P.A != 0, np.power(xp[None, :], P.beta[:, None]), 0.0), axis=1)
    return P.R * t * s


def _target(P, q, eta):
    lw = P.logtheta + (P.G @ q) / eta
    top = np.max(lw[P.pos])
    e = np.where(P.pos, np.exp(np.maximum(lw - top, EXP_FLOOR)), 0.0)
    return P.M * e / e.sum()


def _field(P, q, x, eta, pin_x):
    dq = P.w - _rate(P, q, x)
    if pin_x:
        return dq, np.zeros(P.n)
    dx = _target(P, q, eta) - x
    return dq, _remove_residual(dx, x)


def _remove_residual(dx, x):
    total = x.sum()
    if total > 0.0:
        return dx - dx.sum() * x / total
    return dx - dx.mean()


def _eta_at(t, eta_times, eta_vals):
    eta = eta_vals[0]
    for k in range(1, len(eta_times)):
        if eta_times[k] <= t:
            eta = eta_vals[k]
        else:
            break
    return eta


def integrate_closed_loop(sat, M, A, R, alpha, beta, lbar, w, G, theta, logtheta,
                          eta_times, eta_vals, q0, x0, t0, dt, nsteps, stride, pin_x, qbound,
                          clamp_tol, mass_tol, times_out, Q_out, X_out):
    """Fixed-step RK4 of ``dq = w - F(q, x)``, ``dx = M softmax(log theta + Gq/eta) - x``.

    After each step ``q`` is clamped at 0 and ``x`` rescaled to mass ``M``.
    Returns ``(status, fail_step, fail_mag, worst_clamp, worst_mass, n_recorded)``
    with status 0 ok, 1 clamp > ``clamp_tol``, 2 mass error > ``mass_tol``,
    3 unbounded or non-finite ``q``.
    """
    P = _Params(sat, M, A, R, alpha, beta, lbar, w, G, theta, logtheta)
    q = np.array(q0, dtype=float)
    x = np.array(x0, dtype=float)
    worst_clamp = worst_mass = 0.0
    status, fail_step, fail_mag = 0, -1, 0.0
    times_out[0] = t0
    Q_out[0] = q
    X_out[0] = x
    rec = 1
    for step in range(1, nsteps + 1):
        eta = _eta_at(t0 + (step - 1) * dt, eta_times, eta_vals)
        k1q, k1x = _field(P, q, x, eta, pin_x)
        k2q, k2x = _field(P, q + 0.5 * dt * k1q, x + 0.5 * dt * k1x, eta, pin_x)
        k3q, k3x = _field(P, q + 0.5 * dt * k2q, x + 0.5 * dt * k2x, eta, pin_x)
        k4q, k4x = _field(P, q + dt * k3q, x + dt * k3x, eta, pin_x)
        q = q + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
        x = x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        neg = q < 0.0
        if neg.any():
            depth = float(-q[neg].min())
            worst_clamp = max(worst_clamp, depth)
            if depth > clamp_tol:
                status, fail_mag = 1, depth
            q[neg] = 0.0
        qmax = float(q.max())
        if not np.all(np.isfinite(q)):
            status, fail_mag = 3, float("nan")
        elif qmax > qbound:
            status, fail_mag = 3, qmax
        xneg = x < 0.0
        if xneg.any():
            if -x[xneg].min() > mass_tol and status == 0:
                status, fail_mag = 2, float(-x[xneg].min())
            x[xneg] = 0.0
        tot = float(x.sum())
        worst_mass = max(worst_mass, abs(tot - M))
        if abs(tot - M) > mass_tol and status == 0:
            status, fail_mag = 2, tot - M
        x = x * (M / tot)
        if status != 0:
            fail_step = step
            break
        if step % stride == 0 or step == nsteps:
            times_out[rec] = t0 + step * dt
            Q_out[rec] = q
            X_out[rec] = x
            rec += 1
    return status, fail_step, fail_mag, worst_clamp, worst_mass, rec


def _rk4_q(P, q, x, h):
    k1 = P.w - _rate(P, q, x)
    k2 = P.w - _rate(P, q + 0.5 * h * k1, x)
    k3 = P.w - _rate(P, q + 0.5 * h * k2, x)
    k4 = P.w - _rate(P, q + h * k3, x)
    return q + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_agents(sat, M, A, R, alpha, beta, lbar, w, G, theta, logtheta, eta_times, eta_vals,
                     q, counts, N, clock, cursor, t_end, dt, qbound, clamp_tol, rec_times,
                     times_out, Q_out, X_out, gaps, u_agent, u_new):
    """Finite-population event loop with a single aggregate Exponential(N) clock.

    ``q``, ``counts``, ``clock = [t, t_next]`` and ``cursor = [rec, draw]``
    are updated in place so a call can resume after fresh random draws.
    Returns 0 when ``t_end`` is reached, 1 when the draws ran out, -1 on a
    clamp violation and -3 on unbounded ``q``.
    """
    P = _Params(sat, M, A, R, alpha, beta, lbar, w, G, theta, logtheta)
    t, t_next = float(clock[0]), float(clock[1])
    rec, draw = int(cursor[0]), int(cursor[1])
    nrec, ndraw = len(rec_times), len(gaps)
    qv = np.array(q, dtype=float)
    x = M * counts / N
    status = 0
    while True:
        goal = min(t_next, t_end)
        if rec < nrec and rec_times[rec] < goal:
            goal = float(rec_times[rec])
        span = goal - t
        if span > 0.0:
            nsub = int(span / dt)
            if nsub * dt < span:
                nsub += 1
            h = span / nsub
            for _ in range(nsub):
                qv = _rk4_q(P, qv, x, h)
                neg = qv < 0.0
                if neg.any():
                    if -qv[neg].min() > clamp_tol:
                        status = -1
                    qv[neg] = 0.0
                if not np.all(np.isfinite(qv)) or qv.max() > qbound:
                    status = -3
                if status != 0:
                    break
            if status != 0:
                break
        t = goal
        if rec < nrec and t == rec_times[rec]:
            times_out[rec] = t
            Q_out[rec] = qv
            X_out[rec] = x
            rec += 1
            continue
        if t >= t_end:
            status = 0
            break
        if draw >= ndraw:
            status = 1
            break
        pi = _target(P, qv, _eta_at(t, eta_times, eta_vals))
        pick = min(int(math.floor(u_agent[draw] * N)), N - 1)
        cum = np.cumsum(counts)
        j = int(np.searchsorted(cum, pick, side="right"))
        thresh = u_new[draw] * M
        acc, inew = 0.0, -1
        for i in range(P.n):
            if pi[i] > 0.0:
                inew = i
                acc += pi[i]
                if acc > thresh:
                    break
        counts[j] -= 1
        counts[inew] += 1
        x = M * counts / N
        t_next = t + gaps[draw] / N
        draw += 1
    q[:] = qv
    clock[0], clock[1] = t, t_next
    cursor[0], cursor[1] = rec, draw
    return status
