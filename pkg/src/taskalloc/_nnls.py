"""Minimum-norm non-negative solutions of consistent linear systems."""

import numpy as np
from scipy.optimize import nnls


def _min_norm_on_support(A, b, support):
    z = np.zeros(A.shape[1])
    if support.any():
        z[support] = np.linalg.lstsq(A[:, support], b, rcond=None)[0]
    return z


def min_norm_nonneg_solve(A, b, tol=1e-10):
    """Return ``argmin ||z||_2`` subject to ``A z = b, z >= 0``, or ``None``.

    The unconstrained minimum-norm solution is tried first.  Otherwise the
    problem is posed as least-distance programming ``min ||z|| s.t. E z >= f``
    and solved through its NNLS dual (Lawson & Hanson, ch. 23); the support
    found there is then re-solved in minimum-norm form, which is exact when
    the support is right.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))

    def ok(z):
        return z.min(initial=0.0) >= -tol * scale and np.max(np.abs(A @ z - b), initial=0.0) <= tol * scale

    z = np.linalg.lstsq(A, b, rcond=None)[0]
    if ok(z):
        return np.maximum(z, 0.0)

    E = np.vstack([A, -A, np.eye(n)])
    f = np.concatenate([b, -b, np.zeros(n)])
    Ed = np.vstack([E.T, f[None, :]])
    e = np.zeros(n + 1)
    e[-1] = 1.0
    u, _ = nnls(Ed, e, maxiter=50 * Ed.shape[1])
    r = Ed @ u - e
    if abs(r[-1]) < 1e-14:
        return None
    z = -r[:n] / r[-1]

    support = z > tol * scale
    for _ in range(n + 1):
        cand = _min_norm_on_support(A, b, support)
        if ok(cand):
            return np.maximum(cand, 0.0)
        neg = support & (cand < 0)
        if not neg.any():
            break
        support &= ~neg
    return np.maximum(z, 0.0) if ok(z) else None
