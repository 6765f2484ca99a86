"""Design of the payoff matrix ``G``.

The pipeline is

1. :func:`optimal_equilibrium` finds the stationary pair ``(q*, x*)`` that
   minimizes the cost ``c(q)``;
2. :func:`sample_constraints` draws ``(q_s, x_s)`` and the profile
   ``y_s = g(q_s)`` that nulls the drift at ``q_s``;
3. :func:`design_G` solves a margin-maximizing LP over the free entries of
   ``G`` given the structure pattern;
4. :func:`verify_conditions` checks the three sufficient conditions for
   convergence: symmetry of ``G dF/dx``, positive column alignment on the
   samples and row dominance at ``q*``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.stats import qmc

from taskalloc.closed_loop import DENSE, DIAGONAL, NEIGHBOR_SHARED, PayoffMatrix
from taskalloc.errors import (
    ConfigurationError,
    DesignInfeasibleError,
    GInfeasibleError,
    InfeasibilityError,
    SamplingError,
    SingularityError,
)
from taskalloc.model import (
    HETEROGENEOUS_SENSING,
    RESOURCE_COLLECTION,
    WATER_DISTRIBUTION,
    Infeasible,
    RateFamily,
    StationaryPair,
    jacobian_x,
    reduction_rate,
    solve_g,
    solve_stationary_q,
    supremum_rate,
)

__all__ = [
    "SUM_OF_SQUARES",
    "MAX_NORM",
    "CostFunction",
    "ConstraintSample",
    "DesignReport",
    "evaluate_cost",
    "optimal_equilibrium",
    "sample_constraints",
    "design_G",
    "verify_conditions",
    "column_margins",
    "row_values",
]

SUM_OF_SQUARES = "sum_of_squares"
MAX_NORM = "max_norm"

ENTRY_BOUND = 10.0
ROW_TOL = 1e-9
SYMMETRY_TOL = 1e-8
SUPPORT_TOL = 1e-12
H_FLOOR = 1e-14
# the sample margin of a good G is often ~1e-7, below the HiGHS default tolerance
LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


@dataclass(frozen=True)
class CostFunction:
    kind: str = SUM_OF_SQUARES

    def __post_init__(self):
        if self.kind not in (SUM_OF_SQUARES, MAX_NORM):
            raise ConfigurationError(f"unknown cost {self.kind!r}")

    def __call__(self, q):
        return evaluate_cost(self, q)


def evaluate_cost(cost: CostFunction, q) -> float:
    q = np.asarray(q, dtype=float)
    if cost.kind == SUM_OF_SQUARES:
        return float(q @ q)
    return float(np.max(q, initial=0.0))


# ---------------------------------------------------------------------------
# optimal stationary pair


def _project_simplex(v, M):
    """Euclidean projection onto ``{x >= 0, sum x = M}`` (sort based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - M
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _cost_of_x(family, w, cost, x):
    q = solve_stationary_q(family, x, w)
    if isinstance(q, Infeasible):
        return math.inf
    return evaluate_cost(cost, q)


def _feasibility_anchor(family, w, M):
    """Simplex point maximizing ``min_i sup_q F_i(q, x) / w_i``."""
    n = family.n
    need = w > 0
    x0 = np.full(n, M / n)
    if family.kind == WATER_DISTRIBUTION or not need.any():
        return x0, math.inf

    def ratio(x):
        return supremum_rate(family, np.maximum(x, 0.0))[need] / w[need]

    res = minimize(
        lambda v: -v[-1],
        np.append(x0, ratio(x0).min()),
        jac=lambda v: np.append(np.zeros(n), -1.0),
        constraints=[
            {"type": "eq", "fun": lambda v: v[:n].sum() - M},
            {"type": "ineq", "fun": lambda v: ratio(v[:n]) - v[-1]},
        ],
        bounds=[(0.0, M)] * n + [(None, None)],
        method="SLSQP",
        options={"maxiter": 500, "ftol": 1e-14},
    )
    x = _project_simplex(res.x[:n], M)
    return x, float(ratio(x).min())


def _num_grad(f, x, fx, h):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fp = f(x + e)
        fm = f(x - e) if x[j] >= h else math.inf
        if math.isfinite(fp) and math.isfinite(fm):
            g[j] = (fp - fm) / (2 * h)
        elif math.isfinite(fp):
            g[j] = (fp - fx) / h
        elif math.isfinite(fm):
            g[j] = (fx - fm) / h
        else:
            g[j] = 0.0
    return g


def _kkt_residual(x, g, M):
    """Norm of the simplex-projected gradient (first-order optimality residual)."""
    supp = x > SUPPORT_TOL * M
    lam = g[supp].mean() if supp.any() else g.min()
    r = np.where(supp, g - lam, np.minimum(g - lam, 0.0))
    return float(np.linalg.norm(r))


def _pgd(f, x, M, tol, max_iter, h):
    """Projected gradient descent with Armijo backtracking on the simplex."""
    fx = f(x)
    s = None
    converged = False
    for _ in range(max_iter):
        g = _num_grad(f, x, fx, h)
        gnorm = np.linalg.norm(g)
        if _kkt_residual(x, g, M) <= tol * max(1.0, gnorm, abs(fx)) or gnorm == 0:
            converged = True
            break
        s = (1e-2 * M / gnorm) if s is None else 4.0 * s
        for _ in range(80):
            xn = _project_simplex(x - s * g, M)
            fn = f(xn)
            if fn <= fx + 1e-4 * g @ (xn - x):
                break
            s *= 0.5
        else:
            converged = True  # no descent available at machine precision
            break
        if np.max(np.abs(xn - x)) <= 1e-15 * M:
            x, fx = xn, fn
            converged = True
            break
        x, fx = xn, fn
    return x, fx, converged


def _min_mass_at_level(family, w, t):
    """Least total mass with ``F_i(t, x) >= w_i`` for every task, and the minimizer."""
    need = w > 0
    lev = np.where(need, t, 0.0)
    coef = family.R * family.level_factor(lev)
    n = family.n
    if family.kind in (RESOURCE_COLLECTION, WATER_DISTRIBUTION):
        x = np.zeros(n)
        x[need] = np.power(w[need] / coef[need], 1.0 / family.beta[need])
        return float(x.sum()), x
    A = family.incidence[need]
    if np.all(family.beta == 1.0):
        res = linprog(np.ones(n), A_ub=-(coef[need, None] * A), b_ub=-w[need],
                      bounds=[(0, None)] * n, method="highs")
        if res.status != 0:
            return math.inf, None
        return float(res.fun), res.x
    beta = family.beta[need]

    def short(x):
        return coef[need] * np.sum(A * np.power(np.maximum(x, 0)[None, :], beta[:, None]), axis=1) - w[need]

    res = minimize(lambda x: x.sum(), np.ones(n), jac=lambda x: np.ones(n),
                   constraints=[{"type": "ineq", "fun": short}], bounds=[(0, None)] * n,
                   method="SLSQP", options={"maxiter": 1000, "ftol": 1e-15})
    if not res.success or short(res.x).min() < -1e-10:
        return math.inf, None
    return float(res.x.sum()), res.x


def _max_norm_optimum(family, w, M):
    """Smallest common level ``t`` whose minimal mass fits in ``M`` (water filling)."""
    lo, hi = 0.0, 1.0
    for _ in range(2000):
        mass, _ = _min_mass_at_level(family, w, hi)
        if mass <= M:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise InfeasibilityError("no level t admits a stationary pair within mass M")
    while hi - lo > 1e-15 * hi:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _min_mass_at_level(family, w, mid)[0] <= M:
            hi = mid
        else:
            lo = mid
    mass, x = _min_mass_at_level(family, w, hi)
    # spread the slack mass proportionally so the pair lies on the simplex
    x = x + (M - mass) * (x / mass if mass > 0 else np.full(family.n, 1.0 / family.n))
    return x


def _canonical_profile(family, w, M, q, x):
    """Deterministic representative of the optimal profile set ``{x in X_M : F(q, x) = w}``.

    For heterogeneous sensing with ``β = 1`` that set is a polytope; the
    point maximizing ``min_j x_j`` is taken so that ``θ = x*`` keeps every
    strategy that can carry mass.  Otherwise ``x`` is returned unchanged.
    """
    if family.kind != HETEROGENEOUS_SENSING or not np.all(family.beta == 1.0):
        return x
    n = family.n
    coef = family.R * family.level_factor(q)
    A = coef[:, None] * family.incidence
    res = linprog(np.append(np.zeros(n), -1.0),
                  A_eq=np.block([[A, np.zeros((family.m, 1))], [np.ones((1, n)), np.zeros((1, 1))]]),
                  b_eq=np.append(w, M),
                  A_ub=np.hstack([-np.eye(n), np.ones((n, 1))]), b_ub=np.zeros(n),
                  bounds=[(0, None)] * n + [(0, None)], method="highs", options=LP_OPTIONS)
    if res.status != 0:
        return x
    y = np.maximum(res.x[:n], 0.0)
    y *= M / y.sum()
    if np.max(np.abs(reduction_rate(family, q, y) - w)) > 1e-8:
        return x
    return y


def _starts(family, anchor, M, count):
    pts = qmc.Halton(d=family.n, scramble=False).random(count + 1)[1:]
    pts = np.clip(pts, 1e-12, 1.0)
    base = -np.log(pts)
    return M * base / base.sum(axis=1, keepdims=True)


def optimal_equilibrium(family: RateFamily, w, M, cost: CostFunction, n_starts=20,
                        tol=1e-8, max_iter=500) -> StationaryPair:
    """Cost-minimizing stationary pair over the simplex of mass ``M``.

    For smooth costs this runs projected gradient descent with central
    differences from ``n_starts`` Halton points.  Starts outside the feasible
    region are pulled toward a feasibility anchor (halving the distance)
    until feasible.  The max-norm cost is minimized exactly by bisection on
    the common level.  All local minima found are kept in ``local_minima``.

    Raises
    ------
    InfeasibilityError
        If no point of the simplex has a stationary ``q``.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (family.m,):
        raise ConfigurationError("w has the wrong length")
    if not np.any(w > 0):
        x = np.full(family.n, M / family.n)
        return StationaryPair(np.zeros(family.m), x, 0.0,
                              ({"x": x, "q": np.zeros(family.m), "cost": 0.0, "converged": True},))
    if family.n == 1:
        x = np.array([float(M)])
        q = solve_stationary_q(family, x, w)
        if isinstance(q, Infeasible):
            raise InfeasibilityError("the single-strategy population cannot hold w")
        c = evaluate_cost(cost, q)
        return StationaryPair(q, x, c, ({"x": x, "q": q, "cost": c, "converged": True},))

    anchor, ratio = _feasibility_anchor(family, w, M)
    if not ratio > 1.0 or isinstance(solve_stationary_q(family, anchor, w), Infeasible):
        raise InfeasibilityError("no population state of mass M holds the growth rate w")

    if cost.kind == MAX_NORM:
        x = _max_norm_optimum(family, w, M)
        q = solve_stationary_q(family, x, w)
        if isinstance(q, Infeasible):  # pragma: no cover - guarded by the anchor test
            raise InfeasibilityError("level-set optimum is infeasible")
        x = _canonical_profile(family, w, M, q, x)
        c = evaluate_cost(cost, q)
        return StationaryPair(q, x, c, ({"x": x, "q": q, "cost": c, "converged": True},))

    def f(x):
        return _cost_of_x(family, w, cost, x)

    minima = []
    for u in _starts(family, anchor, M, n_starts):
        x = u
        for _ in range(60):
            if math.isfinite(f(x)):
                break
            x = 0.5 * (x + anchor)
        if not math.isfinite(f(x)):
            continue
        x, fx, ok = _pgd(f, x, M, tol, max_iter, h=1e-7 * M)
        minima.append({"x": x, "q": solve_stationary_q(family, x, w), "cost": fx, "converged": ok})
    if not minima:
        raise InfeasibilityError("every start is infeasible")
    best = min(minima, key=lambda d: d["cost"])
    q = best["q"]
    x = _canonical_profile(family, w, M, q, best["x"])
    return StationaryPair(q, x, best["cost"], tuple(minima))


# ---------------------------------------------------------------------------
# constraint samples


@dataclass(frozen=True, eq=False)
class ConstraintSample:
    q: np.ndarray
    x: np.ndarray
    y: np.ndarray


def sample_constraints(family: RateFamily, w, M, count, seed, q_max=200.0, q_min=1e-2,
                       budget_factor=10):
    """Draw ``count`` samples; ``q`` log-uniform on ``[q_min, q_max]``, ``x`` uniform on the simplex.

    Draws for which ``g(q)`` has no non-negative solution are discarded and
    redrawn, at most ``budget_factor * count`` draws in total.
    """
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    w = np.asarray(w, dtype=float)
    rng = np.random.default_rng(seed)
    out = []
    attempts = 0
    lo, hi = math.log(q_min), math.log(q_max)
    while len(out) < count:
        if attempts >= budget_factor * count:
            raise SamplingError(f"only {len(out)} of {count} samples after {attempts} draws")
        attempts += 1
        q = np.exp(rng.uniform(lo, hi, size=family.m))
        x = M * rng.dirichlet(np.ones(family.n))
        try:
            y = solve_g(family, q, w)
        except (GInfeasibleError, SingularityError):
            continue
        out.append(ConstraintSample(q, x, y))
    return out


def _stack(samples):
    return (np.array([s.q for s in samples]), np.array([s.x for s in samples]),
            np.array([s.y for s in samples]))


def _h_vectors(family, w, samples):
    """``h[s, i] = (F_i(q_s, x_s) - w_i) (x_s - y_s)`` with shape ``(S, m, n)``."""
    Q, X, Y = _stack(samples)
    F = np.array([reduction_rate(family, q, x) for q, x in zip(Q, X)])
    return (F - w)[:, :, None] * (X - Y)[:, None, :]


def column_margins(G, family, w, samples):
    """Normalized alignment ``h_i' G_col_i / ||h_i||`` per sample and task; NaN where ``h = 0``."""
    G = G.entries if isinstance(G, PayoffMatrix) else np.asarray(G)
    H = _h_vectors(family, np.asarray(w, dtype=float), samples)
    norms = np.linalg.norm(H, axis=2)
    dots = np.einsum("sin,ni->si", H, G)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norms > H_FLOOR, dots / norms, np.nan)


def row_values(G, pair: StationaryPair):
    """``(G_row_i - G_row_j) q* x*_i`` as an ``(n, n)`` array."""
    G = G.entries if isinstance(G, PayoffMatrix) else np.asarray(G)
    p = G @ pair.q
    return (p[:, None] - p[None, :]) * pair.x[:, None]


# ---------------------------------------------------------------------------
# LP design


def _basis(structure, family):
    n, m = family.n, family.m
    if structure == DIAGONAL:
        if family.kind != RESOURCE_COLLECTION and family.kind != WATER_DISTRIBUTION:
            raise ConfigurationError("diagonal structure needs m == n with one strategy per task")
        B = []
        for k in range(min(n, m)):
            b = np.zeros((n, m))
            b[k, k] = 1.0
            B.append(b)
        return B
    if structure == NEIGHBOR_SHARED:
        if family.kind != HETEROGENEOUS_SENSING:
            raise ConfigurationError("neighbor_shared structure needs a heterogeneous sensing family")
        if np.ptp(family.beta) != 0 or family.beta[0] != 1.0:
            raise ConfigurationError(
                "neighbor_shared G does not symmetrize G dF/dx when beta != 1; "
                "no structure is guessed for this case")
        B = []
        for j in range(m):
            b = np.zeros((n, m))
            b[list(family.neighbors[j]), j] = 1.0
            B.append(b)
        return B
    if structure == DENSE:
        B = []
        for i in range(n):
            for j in range(m):
                b = np.zeros((n, m))
                b[i, j] = 1.0
                B.append(b)
        return B
    raise ConfigurationError(f"unknown structure {structure!r}")


def _matrix(structure, family, entries):
    if structure == NEIGHBOR_SHARED:
        return PayoffMatrix(entries, NEIGHBOR_SHARED, family.neighbors)
    return PayoffMatrix(entries, structure)


@dataclass(eq=False)
class DesignReport:
    """Outcome of designing or verifying ``G``; ``passed`` needs all three verdicts."""

    G: PayoffMatrix
    margin: float
    verdicts: dict
    violations: dict
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.verdicts.values())

    def to_dict(self):
        return {
            "G": self.G.entries.tolist(),
            "structure": self.G.structure,
            "margin": self.margin,
            "passed": self.passed,
            "verdicts": self.verdicts,
            "violation_counts": {k: len(v) for k, v in self.violations.items()},
            "violations": self.violations,
            "details": self.details,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def design_G(samples, structure, pair: StationaryPair, family: RateFamily, w,
             bound=ENTRY_BOUND) -> DesignReport:
    """Maximize the normalized column margin ``eps`` over the free entries of ``G``.

    Constraints: ``h_{s,i}' G_col_i >= eps ||h_{s,i}||`` for every sample and
    task, ``(G_row_i - G_row_j) q* >= 0`` wherever ``x*_i > 0``, and
    ``|entry| <= bound``.  Solved with HiGHS, which is deterministic for
    identical input.  The returned report carries verdicts on the same
    samples.

    Raises
    ------
    DesignInfeasibleError
        If the LP is infeasible or the optimal margin is not positive.
    """
    if not samples:
        raise ConfigurationError("design needs at least one sample")
    w = np.asarray(w, dtype=float)
    B = np.array(_basis(structure, family))  # (K, n, m)
    K = len(B)
    H = _h_vectors(family, w, samples)  # (S, m, n)
    norms = np.linalg.norm(H, axis=2)
    keep = norms > H_FLOOR
    # h_{s,i}' B_k[:, i]
    coef = np.einsum("sin,kni->sik", H, B)[keep]  # (R, K)
    rows_b = np.hstack([-coef, norms[keep][:, None]])
    p_basis = np.einsum("knm,m->kn", B, pair.q)  # (K, n): payoff per basis element
    constraints = []
    support = np.flatnonzero(pair.x > SUPPORT_TOL * max(pair.x.sum(), 1.0))
    for i in support:
        for j in range(family.n):
            if i != j:
                constraints.append(-(p_basis[:, i] - p_basis[:, j]))
    rows_c = np.hstack([np.array(constraints), np.zeros((len(constraints), 1))]) if constraints else np.zeros((0, K + 1))
    A_ub = np.vstack([rows_b, rows_c])
    b_ub = np.zeros(A_ub.shape[0])
    c = np.zeros(K + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=[(-bound, bound)] * K + [(None, bound)],
                  method="highs", options=LP_OPTIONS)
    if res.status != 0:
        raise DesignInfeasibleError(f"margin LP failed: {res.message}")
    theta = res.x[:K]
    entries = np.einsum("k,knm->nm", theta, B)
    if structure == NEIGHBOR_SHARED:
        entries = family.incidence.T * theta[None, :]
    G = _matrix(structure, family, entries)
    # the LP value is within solver tolerance; report the exactly evaluated margin
    margins = column_margins(G, family, w, samples)
    eps = float(np.nanmin(margins)) if np.isfinite(margins).any() else float(res.x[-1])
    if not eps > 0:
        flat = np.argsort(np.nan_to_num(margins, nan=np.inf), axis=None)[:10]
        worst = [dict(sample=int(s), task=int(i), margin=float(margins[s, i]))
                 for s, i in zip(*np.unravel_index(flat, margins.shape))]
        raise DesignInfeasibleError(f"optimal margin eps = {eps:.3e} is not positive", eps, worst)
    report = verify_conditions(G, family, w, float(pair.x.sum()), samples, pair)
    report.margin = eps
    report.details["lp_margin"] = float(res.x[-1])
    return report


def verify_conditions(G, family: RateFamily, w, M, samples, pair: StationaryPair,
                      n_symmetry=200, seed=0, q_max=200.0) -> DesignReport:
    """Check the three sufficient conditions on ``G``.

    (a) ``G J(q, x)`` symmetric at ``n_symmetry`` random points to ``1e-8``;
    (b) every sample has a strictly positive normalized column margin;
    (c) ``(G_row_i - G_row_j) q* x*_i >= -1e-9`` for all ``i, j``.
    """
    if not isinstance(G, PayoffMatrix):
        G = PayoffMatrix(G)
    w = np.asarray(w, dtype=float)
    E = G.entries
    if E.shape != (family.n, family.m):
        raise ConfigurationError(f"G has shape {E.shape}, expected ({family.n}, {family.m})")
    rng = np.random.default_rng(seed)
    asym = 0.0
    worst_a = []
    for k in range(n_symmetry):
        q = np.exp(rng.uniform(math.log(1e-2), math.log(q_max), size=family.m))
        x = M * rng.dirichlet(np.ones(family.n))
        GJ = E @ jacobian_x(family, q, x)
        d = float(np.max(np.abs(GJ - GJ.T)))
        if d > SYMMETRY_TOL:
            worst_a.append(dict(point=k, asymmetry=d))
        asym = max(asym, d)

    margins = column_margins(G, family, w, samples)
    finite = np.isfinite(margins)
    bad_b = np.argwhere(finite & ~(margins > 0))
    viol_b = [dict(sample=int(s), task=int(i), margin=float(margins[s, i])) for s, i in bad_b[:50]]
    min_margin = float(np.min(margins[finite])) if finite.any() else float("nan")

    R = row_values(G, pair)
    bad_c = np.argwhere(R < -ROW_TOL)
    viol_c = [dict(i=int(i), j=int(j), value=float(R[i, j])) for i, j in bad_c]

    verdicts = {"a": asym <= SYMMETRY_TOL, "b": bool(finite.any() and len(bad_b) == 0), "c": len(bad_c) == 0}
    violations = {"a": worst_a[:50], "b": viol_b, "c": viol_c}
    details = {
        "max_asymmetry": asym,
        "min_column_margin": min_margin,
        "min_row_value": float(R.min()),
        "n_samples": len(samples),
        "n_b_violations": int(len(bad_b)),
        "n_symmetry_points": n_symmetry,
    }
    return DesignReport(G, min_margin, verdicts, violations, details)
