"""Task allocation game dynamics: reduction-rate families and stationary points.

The task levels evolve as ``dq/dt = -F(q, x) + w`` where ``F`` is the
reduction rate produced by the population state ``x`` and ``w`` is the
constant growth rate.  Three families of ``F`` are supported:

``resource_collection``
    ``F_i = R_i tanh(alpha_i q_i / 2) x_i ** beta_i`` with ``m == n``.
``heterogeneous_sensing``
    ``F_i = R_i tanh(alpha_i q_i / 2) sum_{j in N_i} x_j ** beta_i``.
``water_distribution``
    ``F_i = q_i x_i / lbar_i`` with ``m == n``.

Note that ``(exp(a) - 1) / (exp(a) + 1) == tanh(a / 2)``; the tanh form is
used throughout because it is free of overflow for large ``alpha * q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from taskalloc._nnls import min_norm_nonneg_solve
from taskalloc.errors import ConfigurationError, GInfeasibleError, SingularityError

__all__ = [
    "RESOURCE_COLLECTION",
    "HETEROGENEOUS_SENSING",
    "WATER_DISTRIBUTION",
    "RateFamily",
    "Infeasible",
    "StationaryPair",
    "as_task_vector",
    "as_population_state",
    "as_growth_rate",
    "reduction_rate",
    "drift",
    "jacobian_x",
    "supremum_rate",
    "solve_stationary_q",
    "solve_g",
]

RESOURCE_COLLECTION = "resource_collection"
HETEROGENEOUS_SENSING = "heterogeneous_sensing"
WATER_DISTRIBUTION = "water_distribution"
_KINDS = (RESOURCE_COLLECTION, HETEROGENEOUS_SENSING, WATER_DISTRIBUTION)

MASS_TOL = 1e-9
BISECTION_WIDTH = 1e-12
G_RESIDUAL_TOL = 1e-8


def _per_task(value, m, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(m, float(arr))
    if arr.shape != (m,):
        raise ConfigurationError(f"{name} must be a scalar or have length {m}")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ConfigurationError(f"{name} must be finite and strictly positive")
    return arr


@dataclass(frozen=True, eq=False)
class RateFamily:
    """Parameterized reduction-rate mapping ``F(q, x)``.

    Use the ``resource_collection``, ``heterogeneous_sensing`` and
    ``water_distribution`` constructors rather than building this directly.
    Neighbor sets are stored 0-based.
    """

    kind: str
    m: int
    n: int
    R: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    neighbors: tuple[tuple[int, ...], ...]
    max_levels: np.ndarray | None = None
    incidence: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigurationError(f"unknown rate family {self.kind!r}")
        if self.m < 1 or self.n < 1:
            raise ConfigurationError("m and n must be positive")
        if self.kind in (RESOURCE_COLLECTION, WATER_DISTRIBUTION) and self.m != self.n:
            raise ConfigurationError(f"{self.kind} requires m == n")
        if len(self.neighbors) != self.m:
            raise ConfigurationError("one neighbor set per task is required")
        A = np.zeros((self.m, self.n))
        for i, nb in enumerate(self.neighbors):
            if len(nb) == 0:
                raise ConfigurationError(f"neighbor set of task {i + 1} is empty")
            for j in nb:
                if not 0 <= j < self.n:
                    raise ConfigurationError(f"neighbor index {j + 1} out of range 1..{self.n}")
                A[i, j] = 1.0
        A.setflags(write=False)
        object.__setattr__(self, "incidence", A)
        for arr in (self.R, self.alpha, self.beta, self.max_levels):
            if arr is not None:
                arr.setflags(write=False)

    @classmethod
    def resource_collection(cls, R, alpha, beta, m=None):
        m = m if m is not None else np.size(R)
        if m < 1:
            raise ConfigurationError("m must be positive")
        return cls(
            RESOURCE_COLLECTION, m, m,
            _per_task(R, m, "R"), _per_task(alpha, m, "alpha"), _per_task(beta, m, "beta"),
            tuple((i,) for i in range(m)),
        )

    @classmethod
    def heterogeneous_sensing(cls, neighbors: Sequence[Sequence[int]], n, R, alpha, beta, one_based=False):
        """Build an Example-2 style family; ``neighbors[i]`` lists strategies acting on task ``i``."""
        m = len(neighbors)
        off = 1 if one_based else 0
        nb = tuple(tuple(sorted(int(j) - off for j in s)) for s in neighbors)
        return cls(
            HETEROGENEOUS_SENSING, m, int(n),
            _per_task(R, m, "R"), _per_task(alpha, m, "alpha"), _per_task(beta, m, "beta"),
            nb,
        )

    @classmethod
    def water_distribution(cls, max_levels):
        lbar = np.atleast_1d(np.asarray(max_levels, dtype=float))
        m = lbar.size
        lbar = _per_task(lbar, m, "max_levels")
        ones = np.ones(m)
        return cls(WATER_DISTRIBUTION, m, m, ones, ones.copy(), ones.copy(),
                   tuple((i,) for i in range(m)), lbar)

    @property
    def saturating(self):
        return self.kind != WATER_DISTRIBUTION

    def to_dict(self):
        d = {"kind": self.kind, "m": self.m, "n": self.n}
        if self.kind == WATER_DISTRIBUTION:
            d["max_levels"] = self.max_levels.tolist()
        else:
            d.update(R=self.R.tolist(), alpha=self.alpha.tolist(), beta=self.beta.tolist())
        if self.kind == HETEROGENEOUS_SENSING:
            d["neighbors"] = [[j + 1 for j in nb] for nb in self.neighbors]
        return d

    # -- elementwise building blocks --------------------------------------

    def level_factor(self, q):
        """``t_i(q_i) = tanh(alpha_i q_i / 2)`` (or ``q_i / lbar_i`` for water)."""
        if self.kind == WATER_DISTRIBUTION:
            return q / self.max_levels
        return np.tanh(0.5 * self.alpha * q)

    def level_factor_inverse(self, t):
        if self.kind == WATER_DISTRIBUTION:
            return t * self.max_levels
        return 2.0 * np.arctanh(t) / self.alpha

    def profile_factor(self, x):
        """``S_i(x) = sum_{j in N_i} x_j ** beta_i`` (``x_i`` for water)."""
        if self.kind == WATER_DISTRIBUTION:
            return np.array(x, dtype=float)
        A = self.incidence
        return np.einsum("ij,ij->i", A, np.power(x[None, :], self.beta[:, None]))


@dataclass(frozen=True)
class Infeasible:
    """No stationary ``q`` exists for the listed (0-based) tasks."""

    tasks: tuple[int, ...]

    def __bool__(self):
        return False


@dataclass(frozen=True, eq=False)
class StationaryPair:
    """A pair ``(q, x)`` with ``F(q, x) = w``; ``local_minima`` is filled by the optimizer."""

    q: np.ndarray
    x: np.ndarray
    cost: float = float("nan")
    local_minima: tuple = ()

    def to_dict(self):
        return {
            "q": self.q.tolist(),
            "x": self.x.tolist(),
            "cost": self.cost,
            "local_minima": [dict(x=lm["x"].tolist(), q=lm["q"].tolist(), cost=lm["cost"],
                                  converged=lm["converged"]) for lm in self.local_minima],
        }


def as_task_vector(q, m=None):
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or (m is not None and q.size != m):
        raise ConfigurationError(f"task vector must have length {m}")
    if not np.all(np.isfinite(q)) or np.any(q < 0):
        raise ConfigurationError("task vector entries must be finite and >= 0")
    return q


def as_growth_rate(w, m=None):
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or (m is not None and w.size != m):
        raise ConfigurationError(f"growth rate must have length {m}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ConfigurationError("growth rate entries must be finite and >= 0")
    return w


def as_population_state(x, M=None, n=None):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or (n is not None and x.size != n):
        raise ConfigurationError(f"population state must have length {n}")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise ConfigurationError("population state entries must be finite and >= 0")
    if M is not None and abs(x.sum() - M) > MASS_TOL:
        raise ConfigurationError(f"population state sums to {x.sum()!r}, expected mass {M!r}")
    return x


def _check(family, q=None, x=None, w=None):
    if q is not None and np.shape(q) != (family.m,):
        raise ConfigurationError(f"q has shape {np.shape(q)}, expected ({family.m},)")
    if x is not None and np.shape(x) != (family.n,):
        raise ConfigurationError(f"x has shape {np.shape(x)}, expected ({family.n},)")
    if w is not None and np.shape(w) != (family.m,):
        raise ConfigurationError(f"w has shape {np.shape(w)}, expected ({family.m},)")


def reduction_rate(family: RateFamily, q, x) -> np.ndarray:
    """Evaluate ``F(q, x)``; component ``i`` depends on ``q_i`` and ``x`` only."""
    q = np.asarray(q, dtype=float)
    x = np.asarray(x, dtype=float)
    _check(family, q=q, x=x)
    return family.R * family.level_factor(q) * family.profile_factor(x)


def drift(family: RateFamily, q, x, w) -> np.ndarray:
    """Right-hand side of the task dynamics, ``-F(q, x) + w``."""
    w = np.asarray(w, dtype=float)
    _check(family, w=w)
    return w - reduction_rate(family, q, x)


def jacobian_x(family: RateFamily, q, x) -> np.ndarray:
    """Analytic ``dF_i / dx_j`` as an ``(m, n)`` array.

    Raises
    ------
    SingularityError
        If some ``x_j == 0`` enters a task with ``beta_i < 1`` and a nonzero
        level factor, where the derivative is unbounded.
    """
    q = np.asarray(q, dtype=float)
    x = np.asarray(x, dtype=float)
    _check(family, q=q, x=x)
    coef = family.R * family.level_factor(q)
    if family.kind == WATER_DISTRIBUTION:
        return np.diag(coef)
    A = family.incidence
    beta = family.beta[:, None]
    active = (A > 0) & (coef[:, None] != 0)
    if np.any(active & (x[None, :] == 0) & (beta < 1)):
        raise SingularityError("jacobian_x is unbounded at x_j = 0 when beta < 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        dpow = np.where(beta == 1, 1.0, beta * np.power(x[None, :], beta - 1))
    return np.where(active, coef[:, None] * dpow, 0.0)


def supremum_rate(family: RateFamily, x) -> np.ndarray:
    """``lim_{q_i -> inf} F_i(q_i, x)``; infinite for water distribution with ``x_i > 0``."""
    x = np.asarray(x, dtype=float)
    _check(family, x=x)
    if family.kind == WATER_DISTRIBUTION:
        return np.where(x > 0, np.inf, 0.0)
    return family.R * family.profile_factor(x)


def _bisect_levels(fun, target, width=BISECTION_WIDTH):
    """Vectorized bisection for increasing ``fun`` with ``fun(0) = 0 < target``."""
    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    # bracket doubling from upper = 1
    for _ in range(2000):
        short = fun(hi) < target
        if not short.any():
            break
        lo = np.where(short, hi, lo)
        hi = np.where(short, 2.0 * hi, hi)
    else:  # pragma: no cover - guarded by the feasibility test
        raise SingularityError("bracket doubling did not terminate")
    while True:
        mid = 0.5 * (lo + hi)
        live = (hi - lo > width) & (mid > lo) & (mid < hi)
        if not live.any():
            break
        below = fun(mid) < target
        lo = np.where(live & below, mid, lo)
        hi = np.where(live & ~below, mid, hi)
    return 0.5 * (lo + hi)


def solve_stationary_q(family: RateFamily, x, w):
    """Unique ``q >= 0`` with ``F(q, x) = w``, or :class:`Infeasible`.

    Each task is solved by bisection on ``[0, upper]`` with bracket doubling
    from ``upper = 1`` down to an interval width of ``1e-12``.  A task is
    infeasible when its supremum rate does not exceed ``w_i``.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    _check(family, x=x, w=w)
    q = np.zeros(family.m)
    need = w > 0
    sup = supremum_rate(family, x)
    bad = need & ~(sup > w)
    if bad.any():
        return Infeasible(tuple(int(i) for i in np.flatnonzero(bad)))
    if not need.any():
        return q
    idx = np.flatnonzero(need)
    scale = (family.R * family.profile_factor(x))[idx]

    def fun(level):
        full = np.zeros(family.m)
        full[idx] = level
        return scale * family.level_factor(full)[idx]

    q[idx] = _bisect_levels(fun, w[idx])
    return q


def solve_g(family: RateFamily, q, w) -> np.ndarray:
    """Non-negative profile ``y`` with ``F(q, y) = w`` (not necessarily on the simplex).

    For heterogeneous sensing the system is linear in ``z = y ** beta``; the
    minimum-Euclidean-norm non-negative ``z`` is returned, which makes ``g``
    single-valued when ``n > m``.

    Raises
    ------
    SingularityError
        If ``q_i == 0`` for a task with ``w_i > 0``.
    GInfeasibleError
        If no non-negative solution reaches residual ``1e-8``.
    """
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    _check(family, q=q, w=w)
    t = family.level_factor(q)
    need = w > 0
    if np.any(need & (t <= 0)):
        raise SingularityError("g(q) is unbounded where q_i = 0 and w_i > 0")
    b = np.divide(w, family.R * t, out=np.zeros(family.m), where=need)
    if family.kind == WATER_DISTRIBUTION:
        y = b
    elif family.kind == RESOURCE_COLLECTION:
        y = np.power(b, 1.0 / family.beta)
    else:
        beta = family.beta
        if np.ptp(beta) != 0:
            raise ConfigurationError("g(q) for heterogeneous sensing requires a common beta")
        z = min_norm_nonneg_solve(family.incidence, b)
        if z is None:
            raise GInfeasibleError("no non-negative y satisfies F(q, y) = w")
        y = np.power(z, 1.0 / beta[0])
    res = np.max(np.abs(reduction_rate(family, q, y) - w), initial=0.0)
    if not res <= G_RESIDUAL_TOL:
        raise GInfeasibleError(f"g(q) residual {res:.3e} exceeds {G_RESIDUAL_TOL:g}")
    return y
