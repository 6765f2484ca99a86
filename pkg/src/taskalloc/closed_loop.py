"""Closed loop of task dynamics, linear payoff ``p = G q`` and the KLD-RL EDM.

The coupled system is integrated with fixed-step classical RK4 by the
kernels in :mod:`taskalloc.kernels`.  After each step ``q`` is clamped at 0
and ``x`` is rescaled to mass ``M``; corrections larger than ``1e-9`` abort
with :class:`~taskalloc.errors.IntegrationInstabilityError`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from taskalloc import kernels
from taskalloc.errors import ConfigurationError, IntegrationInstabilityError, UnboundedTrajectoryError
from taskalloc.model import (
    HETEROGENEOUS_SENSING,
    RESOURCE_COLLECTION,
    RateFamily,
    as_growth_rate,
    as_population_state,
    as_task_vector,
    drift,
)
from taskalloc.protocol import ProtocolParams, delta_storage, edm_field
from taskalloc.errors import DomainError

__all__ = [
    "DIAGONAL",
    "NEIGHBOR_SHARED",
    "DENSE",
    "PayoffMatrix",
    "SimConfig",
    "Trajectory",
    "step",
    "simulate",
    "equilibrium_residual",
    "CLAMP_TOL",
    "MASS_TOL",
    "Q_BOUND",
]

DIAGONAL = "diagonal"
NEIGHBOR_SHARED = "neighbor_shared"
DENSE = "dense"

CLAMP_TOL = 1e-9
MASS_TOL = 1e-9
Q_BOUND = 1e6


@dataclass(frozen=True, eq=False)
class PayoffMatrix:
    """``n x m`` payoff matrix with a declared structure.

    ``diagonal`` requires ``G_ij = 0`` for ``i != j``.  ``neighbor_shared``
    requires ``G_ij = 0`` unless strategy ``i`` is in the neighbor set of
    task ``j``, and all such entries in column ``j`` to be equal.
    """

    entries: np.ndarray
    structure: str = DENSE
    neighbors: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        G = np.array(self.entries, dtype=float)
        if G.ndim != 2 or not np.all(np.isfinite(G)):
            raise ConfigurationError("G must be a finite 2-D array")
        n, m = G.shape
        if self.structure == DIAGONAL:
            off = G.copy()
            np.fill_diagonal(off, 0.0)
            if np.any(off != 0):
                raise ConfigurationError("diagonal G has nonzero off-diagonal entries")
        elif self.structure == NEIGHBOR_SHARED:
            if self.neighbors is None or len(self.neighbors) != m:
                raise ConfigurationError("neighbor_shared G needs one neighbor set per column")
            for j, nb in enumerate(self.neighbors):
                mask = np.zeros(n, dtype=bool)
                mask[list(nb)] = True
                col = G[:, j]
                if np.any(col[~mask] != 0) or (mask.any() and np.ptp(col[mask]) != 0):
                    raise ConfigurationError(f"column {j + 1} of G violates the neighbor_shared pattern")
        elif self.structure != DENSE:
            raise ConfigurationError(f"unknown G structure {self.structure!r}")
        G.setflags(write=False)
        object.__setattr__(self, "entries", G)

    @property
    def shape(self):
        return self.entries.shape

    @classmethod
    def for_family(cls, entries, family: RateFamily):
        """Attach the structure natural to ``family`` (diagonal or neighbor-shared)."""
        if family.kind == HETEROGENEOUS_SENSING:
            return cls(entries, NEIGHBOR_SHARED, family.neighbors)
        if family.kind == RESOURCE_COLLECTION:
            return cls(entries, DIAGONAL)
        return cls(entries, DENSE)

    @classmethod
    def neighbor_shared(cls, column_values, family: RateFamily):
        G = family.incidence.T * np.asarray(column_values, dtype=float)[None, :]
        return cls(G, NEIGHBOR_SHARED, family.neighbors)

    def scaled(self, c):
        return replace(self, entries=c * self.entries)

    def to_dict(self):
        d = {"structure": self.structure, "entries": self.entries.tolist()}
        if self.neighbors is not None:
            d["neighbors"] = [[j + 1 for j in nb] for nb in self.neighbors]
        return d


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Everything needed for one closed-loop run.

    ``eta_schedule`` is an optional sequence of ``(t_start, eta)`` pairs
    giving a piecewise-constant temperature; ``protocol.eta`` applies before
    the first breakpoint.  ``pin_x`` freezes ``x`` at ``x0`` (EDM disabled).
    """

    family: RateFamily
    w: np.ndarray
    G: PayoffMatrix
    protocol: ProtocolParams
    q0: np.ndarray
    x0: np.ndarray
    T: float = 100.0
    dt: float = 1e-3
    stride: int = 100
    eta_schedule: tuple = ()
    pin_x: bool = False

    def __post_init__(self):
        f = self.family
        object.__setattr__(self, "w", as_growth_rate(self.w, f.m))
        object.__setattr__(self, "q0", as_task_vector(self.q0, f.m))
        if self.G.shape != (f.n, f.m):
            raise ConfigurationError(f"G has shape {self.G.shape}, expected ({f.n}, {f.m})")
        if self.protocol.theta.size != f.n:
            raise ConfigurationError("theta length differs from the number of strategies")
        object.__setattr__(self, "x0", as_population_state(self.x0, self.protocol.mass, f.n))
        if not (self.T > 0 and self.dt > 0 and self.dt <= self.T):
            raise ConfigurationError("need T > 0 and 0 < dt <= T")
        if int(self.stride) < 1:
            raise ConfigurationError("record stride must be >= 1")
        object.__setattr__(self, "stride", int(self.stride))
        sched = tuple((float(t), float(e)) for t, e in self.eta_schedule)
        if any(e <= 0 for _, e in sched) or any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ConfigurationError("eta schedule needs increasing times and positive etas")
        object.__setattr__(self, "eta_schedule", sched)

    @property
    def M(self):
        return self.protocol.mass

    @property
    def nsteps(self):
        return max(1, int(round(self.T / self.dt)))

    def eta_arrays(self):
        times = [0.0] + [t for t, _ in self.eta_schedule if t > 0]
        vals = [self.protocol.eta] + [e for t, e in self.eta_schedule if t > 0]
        if self.eta_schedule and self.eta_schedule[0][0] <= 0:
            vals[0] = self.eta_schedule[0][1]
        return np.array(times), np.array(vals)

    def eta_at(self, t):
        times, vals = self.eta_arrays()
        return float(vals[np.searchsorted(times, t, side="right") - 1])

    def to_dict(self):
        return {
            "family": self.family.to_dict(),
            "w": self.w.tolist(),
            "M": self.M,
            "G": self.G.to_dict(),
            "protocol": {"eta": self.protocol.eta, "theta": self.protocol.theta.tolist()},
            "q0": self.q0.tolist(),
            "x0": self.x0.tolist(),
            "T": self.T,
            "dt": self.dt,
            "stride": self.stride,
            "eta_schedule": [list(p) for p in self.eta_schedule],
            "pin_x": self.pin_x,
        }


@dataclass(eq=False)
class Trajectory:
    """Decimated record of a run: time grid plus ``q``, ``x``, ``p``, ``S`` and optionally ``L``."""

    times: np.ndarray
    q: np.ndarray
    x: np.ndarray
    p: np.ndarray
    S: np.ndarray
    L: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def columns(self):
        m, n = self.q.shape[1], self.x.shape[1]
        return (["t"] + [f"q_{i + 1}" for i in range(m)] + [f"x_{i + 1}" for i in range(n)]
                + [f"p_{i + 1}" for i in range(n)] + ["S", "L"])

    def to_csv(self, path=None):
        """Write (or return) RFC-4180 CSV with columns ``t, q_*, x_*, p_*, S, L``."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\r\n")
        wr.writerow(self.columns())
        L = self.L if self.L is not None else np.full(len(self), np.nan)
        for k in range(len(self)):
            row = np.concatenate([[self.times[k]], self.q[k], self.x[k], self.p[k], [self.S[k], L[k]]])
            wr.writerow([_fmt(v) for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, newline="")
        return text

    def write(self, directory, stem="trajectory"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.to_csv(directory / f"{stem}.csv")
        meta_name = "metadata.json" if stem == "trajectory" else f"{stem}.metadata.json"
        (directory / meta_name).write_text(json.dumps(self.metadata, indent=2, sort_keys=True))

    @classmethod
    def read_csv(cls, path, m, n, metadata=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        o = 1
        q = data[:, o:o + m]
        x = data[:, o + m:o + m + n]
        p = data[:, o + m + n:o + m + 2 * n]
        L = data[:, -1]
        return cls(data[:, 0], q, x, p, data[:, -2], None if np.all(np.isnan(L)) else L, metadata or {})


def _fmt(v):
    if math.isnan(v):
        return "nan"
    return repr(float(v))


def _raise_for(status, fail_step, fail_mag, dt):
    t = fail_step * dt if fail_step is not None and fail_step >= 0 else None
    if status == 1:
        raise IntegrationInstabilityError(
            f"q clamp of {fail_mag:.3e} at step {fail_step} exceeds {CLAMP_TOL:g}; use a smaller dt",
            fail_step, t, fail_mag)
    if status == 2:
        raise IntegrationInstabilityError(
            f"mass correction of {fail_mag:.3e} at step {fail_step} exceeds {MASS_TOL:g}; use a smaller dt",
            fail_step, t, fail_mag)
    if status == 3:
        raise UnboundedTrajectoryError(
            f"max q = {fail_mag!r} left the bound {Q_BOUND:g} at step {fail_step}", fail_step, t, fail_mag)


def _run(config: SimConfig, q0, x0, t0, nsteps, stride, backend=None):
    K = kernels.get_backend(backend)
    nrec = nsteps // stride + 1 + (1 if nsteps % stride else 0)
    times = np.zeros(nrec)
    Q = np.zeros((nrec, config.family.m))
    X = np.zeros((nrec, config.family.n))
    eta_t, eta_v = config.eta_arrays()
    packed = kernels.pack(config.family, config.w, config.G.entries, config.protocol.theta, config.M)
    status, fail_step, fail_mag, worst_clamp, worst_mass, rec = K.integrate_closed_loop(
        *packed, eta_t, eta_v, np.array(q0, dtype=float), np.array(x0, dtype=float),
        float(t0), float(config.dt), int(nsteps), int(stride), int(bool(config.pin_x)), Q_BOUND,
        CLAMP_TOL, MASS_TOL, times, Q, X)
    _raise_for(status, fail_step, fail_mag, config.dt)
    return times[:rec], Q[:rec], X[:rec], worst_clamp, worst_mass


def step(state, config: SimConfig, backend=None):
    """Advance ``(q, x)`` by one RK4 step of size ``config.dt``."""
    q, x = state
    _, Q, X, _, _ = _run(config, q, x, 0.0, 1, 1, backend)
    return Q[-1].copy(), X[-1].copy()


def storage_series(p, x, params: ProtocolParams, M, etas=None):
    """δ-storage at each recorded sample; NaN where ``x`` leaves the support of ``theta``."""
    out = np.empty(len(x))
    for k in range(len(x)):
        prm = params if etas is None else params.with_eta(etas[k])
        try:
            out[k] = delta_storage(p[k], x[k], prm, M)
        except DomainError:
            out[k] = np.nan
    return out


def simulate(config: SimConfig, antistorage=False, quad=None, backend=None) -> Trajectory:
    """Integrate over ``[0, T]`` recording every ``stride``-th step and the final step.

    With ``antistorage=True`` the δ-antistorage ``L`` of
    :func:`taskalloc.passivity.antistorage` is evaluated at each sample.
    """
    times, Q, X, worst_clamp, worst_mass = _run(config, config.q0, config.x0, 0.0,
                                                config.nsteps, config.stride, backend)
    P = Q @ config.G.entries.T
    etas = np.array([config.eta_at(t) for t in times]) if config.eta_schedule else None
    S = storage_series(P, X, config.protocol, config.M, etas)
    L = None
    if antistorage:
        from taskalloc.passivity import antistorage_series

        L = antistorage_series(Q, X, config, quad)
    meta = {
        "config": config.to_dict(),
        "backend": backend or kernels.BACKEND,
        "max_clamp": worst_clamp,
        "max_mass_correction": worst_mass,
    }
    return Trajectory(times, Q, X, P, S, L, meta)


def equilibrium_residual(state, config: SimConfig) -> float:
    """``||w - F(q, x)||_inf + ||EDM field||_inf`` at ``state``."""
    q, x = (np.asarray(v, dtype=float) for v in state)
    p = config.G.entries @ q
    prm = config.protocol.with_eta(config.eta_at(config.T))
    return float(np.max(np.abs(drift(config.family, q, x, config.w)))
                 + np.max(np.abs(edm_field(p, x, prm, config.M))))
