"""δ-antistorage ``L``, Lyapunov monitoring and dissipation checks.

``L(q, x) = (x - g(q))' G ∫_0^1 (F(q, s(τ)) - w) dτ`` with the straight
segment ``s(τ) = τ x + (1 - τ) g(q)``.  The integral is evaluated with
Gauss-Legendre quadrature on ``[0, 1]``, which is exact for ``β = 1``
because ``F`` is then affine in ``x``.  For non-integer ``β`` a composite
rule on a geometric mesh resolves the ``s^β`` endpoint layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from taskalloc.closed_loop import PayoffMatrix, SimConfig, Trajectory
from taskalloc.errors import ConfigurationError, GInfeasibleError
from taskalloc.model import RateFamily, drift, reduction_rate, solve_g
from taskalloc.protocol import ProtocolParams, edm_field, kl_divergence

__all__ = [
    "QuadratureSpec",
    "MonitorReport",
    "antistorage",
    "antistorage_series",
    "lyapunov_monitor",
    "storage_dissipation_gap",
    "antistorage_dissipation_gap",
    "storage_by_maximization",
]


@dataclass(frozen=True)
class QuadratureSpec:
    nodes: int = 16

    def __post_init__(self):
        if int(self.nodes) != self.nodes or self.nodes < 2:
            raise ConfigurationError("quadrature needs an integer node count >= 2")

    def rule(self):
        """Nodes and weights mapped to ``[0, 1]``."""
        t, wt = np.polynomial.legendre.leggauss(int(self.nodes))
        return 0.5 * (t + 1.0), 0.5 * wt


# geometric mesh ratio and depth for the composite rule used when β is not an integer
MESH_RATIO = 0.1
MESH_LEVELS = 16


def _breakpoints(x, y, beta):
    """Panel edges on ``[0, 1]`` for the segment from ``y`` (τ = 0) to ``x`` (τ = 1).

    With integer ``β`` the integrand is a polynomial and one panel suffices.
    Otherwise ``s_j(τ)^β`` has a boundary layer wherever ``s_j`` nearly
    vanishes at an end; its width is ``x_j / (y_j - x_j)`` at τ = 1 (and
    symmetrically at τ = 0).  Panels shrink geometrically toward such an
    end until they are below a tenth of the layer width.
    """
    if np.all(beta == np.round(beta)):
        return np.array([0.0, 1.0])
    d = x - y
    edges = [0.0, 1.0]
    with np.errstate(divide="ignore", invalid="ignore"):
        near_one = np.min(np.where(d < 0, x / -d, np.inf), initial=np.inf)
        near_zero = np.min(np.where(d > 0, y / d, np.inf), initial=np.inf)
    for width, toward_one in ((near_one, True), (near_zero, False)):
        if width >= 1.0:
            continue
        for k in range(1, MESH_LEVELS + 1):
            h = MESH_RATIO**k
            edges.append(1.0 - h if toward_one else h)
            if h <= 0.1 * width:
                break
    return np.unique(edges)


def _entries(G):
    return G.entries if isinstance(G, PayoffMatrix) else np.asarray(G, dtype=float)


def antistorage(q, x, G, family: RateFamily, w, quad: QuadratureSpec | None = None, y=None) -> float:
    """δ-antistorage at ``(q, x)``; ``y`` may pass a precomputed ``g(q)``."""
    quad = quad or QuadratureSpec()
    q = np.asarray(q, dtype=float)
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if y is None:
        y = solve_g(family, q, w)
    d = x - y
    if not np.any(d):
        return 0.0
    nodes, weights = quad.rule()
    edges = _breakpoints(x, y, family.beta)
    integral = np.zeros(family.m)
    for lo, hi in zip(edges[:-1], edges[1:]):
        for tau, wt in zip(lo + (hi - lo) * nodes, (hi - lo) * weights):
            integral += wt * (reduction_rate(family, q, y + tau * d) - w)
    return float(d @ _entries(G) @ integral)


def antistorage_series(Q, X, config: SimConfig, quad=None):
    """``L`` at each recorded sample of a run of ``config``; NaN where ``g(q)`` does not exist."""
    out = np.empty(len(Q))
    for k, (q, x) in enumerate(zip(Q, X)):
        try:
            out[k] = antistorage(q, x, config.G, config.family, config.w, quad)
        except (ArithmeticError, GInfeasibleError):
            out[k] = np.nan
    return out


@dataclass
class MonitorReport:
    """Increments of ``V = S + L`` along a trajectory."""

    V: np.ndarray
    max_increment: float
    worst_index: int | None
    tolerance: float
    n_violations: int
    passed: bool

    def to_dict(self):
        return {
            "passed": self.passed,
            "max_increment": self.max_increment,
            "worst_index": self.worst_index,
            "tolerance": self.tolerance,
            "n_violations": self.n_violations,
            "V0": float(self.V[0]) if len(self.V) else None,
            "V_final": float(self.V[-1]) if len(self.V) else None,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def lyapunov_monitor(traj: Trajectory, G, family: RateFamily, w, params: ProtocolParams,
                     quad=None, rel_tol=1e-6) -> MonitorReport:
    """Check that ``S + L`` never rises by more than ``rel_tol * (1 + |V_0|)``.

    ``L`` is taken from the trajectory when recorded, otherwise computed.
    Any undefined ``V`` (``g(q)`` missing, support violation) counts as a
    violation at that sample.
    """
    if traj.L is not None:
        L = traj.L
    else:
        L = np.empty(len(traj))
        for k in range(len(traj)):
            try:
                L[k] = antistorage(traj.q[k], traj.x[k], G, family, w, quad)
            except (ArithmeticError, GInfeasibleError):
                L[k] = np.nan
    V = np.asarray(traj.S) + L
    if len(V) < 2:
        return MonitorReport(V, 0.0, None, rel_tol, 0, bool(np.all(np.isfinite(V))))
    tol = rel_tol * (1.0 + abs(V[0])) if math.isfinite(V[0]) else 0.0
    inc = np.diff(V)
    bad = ~np.isfinite(inc) | (inc > tol)
    finite_inc = np.where(np.isfinite(inc), inc, np.inf)
    worst = int(np.argmax(finite_inc))
    max_inc = float(finite_inc[worst])
    return MonitorReport(V, max_inc, worst + 1 if bad.any() else None, tol, int(bad.sum()),
                         bool(not bad.any() and math.isfinite(V[0])))


def _rates(traj: Trajectory, config: SimConfig):
    E = config.G.entries
    qdot = np.array([drift(config.family, q, x, config.w) for q, x in zip(traj.q, traj.x)])
    xdot = np.array([edm_field(p, x, config.protocol.with_eta(config.eta_at(t)), config.M)
                     for t, p, x in zip(traj.times, traj.p, traj.x)])
    return qdot, qdot @ E.T, xdot


def _cumtrapz(y, t):
    out = np.zeros_like(t)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


def storage_dissipation_gap(traj: Trajectory, config: SimConfig) -> float:
    """``max_t [S(t) - S(t0) - ∫ p'·x' dτ] / (1 + |S(t0)|)`` with a trapezoid integral."""
    _, pdot, xdot = _rates(traj, config)
    supply = _cumtrapz(np.einsum("ki,ki->k", pdot, xdot), traj.times)
    S = traj.S
    return float(np.max(S - S[0] - supply) / (1.0 + abs(S[0])))


def antistorage_dissipation_gap(traj: Trajectory, config: SimConfig, quad=None) -> float:
    """``max_t [L(t) - L(t0) + ∫ q'·G'·x' dτ] / (1 + |L(t0)|)``."""
    L = traj.L if traj.L is not None else antistorage_series(traj.q, traj.x, config, quad)
    _, pdot, xdot = _rates(traj, config)
    supply = _cumtrapz(np.einsum("ki,ki->k", pdot, xdot), traj.times)
    return float(np.max(L - L[0] + supply) / (1.0 + abs(L[0])))


def storage_by_maximization(p, x, params: ProtocolParams, M=None, max_iter=2000):
    """δ-storage with the maximum found numerically; an oracle for the closed form.

    Maximizes ``p'z - η D(z || θ)`` over the simplex by exponentiated-gradient
    (entropic mirror) ascent with step ``1 / (2η)``, iterating on ``ln z``
    until it stops moving, then evaluates the primal objective at the last
    iterate.
    """
    p = np.asarray(p, dtype=float)
    theta = params.theta
    M = params.mass if M is None else float(M)
    eta = params.eta
    supp = theta > 0
    ps, lth = p[supp], np.log(theta[supp])
    step = 0.5 / eta
    u = lth + math.log(M / theta[supp].sum())
    for _ in range(max_iter):
        g = ps - eta * (u - lth + 1.0)
        v = u + step * g
        v -= v.max()
        v += math.log(M) - math.log(np.sum(np.exp(v)))
        done = np.max(np.abs(np.exp(v) - np.exp(u))) <= 1e-16 * M
        u = v
        if done:
            break
    z = np.exp(u)
    best = float(ps @ z - eta * np.sum(z * (u - lth)))
    inner = float(p @ x) - eta * kl_divergence(x, theta)
    return best - inner
