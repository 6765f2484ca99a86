"""Finite-population simulation with Poisson revision clocks.

``N`` agents revise at the jump times of independent unit-rate Poisson
processes, which is simulated as one aggregate Exponential(``N``) clock and a
uniformly chosen reviser.  Because the KLD-RL choice probabilities do not
depend on the reviser's current strategy, the new strategy is drawn directly
from the revision target.  Between events ``q`` is integrated with RK4 at the
empirical state ``x̂ = M * counts / N``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from taskalloc import kernels
from taskalloc.closed_loop import CLAMP_TOL, Q_BOUND, SimConfig, Trajectory, storage_series
from taskalloc.errors import ConfigurationError, IntegrationInstabilityError, UnboundedTrajectoryError

__all__ = ["AgentSimConfig", "simulate_agents", "initial_counts", "record_times"]

CHUNK = 65536


@dataclass(frozen=True, eq=False)
class AgentSimConfig:
    """Closed-loop configuration plus agent count and seed.

    ``sim.dt`` is the maximal RK4 sub-step for ``q`` between events and
    ``sim.dt * sim.stride`` the recording interval, matching the mean-field
    grid.
    """

    sim: SimConfig
    N: int
    seed: int = 0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ConfigurationError("N must be an integer >= 1")
        if int(self.seed) != self.seed or not (-(2**63) <= int(self.seed) < 2**64):
            raise ConfigurationError("seed must be a 64-bit integer")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self):
        return {"sim": self.sim.to_dict(), "N": self.N, "seed": self.seed}


def initial_counts(x0, M, N):
    """Integer agent counts closest to ``N * x0 / M`` (largest remainder, ties to lower index)."""
    share = N * np.asarray(x0, dtype=float) / M
    counts = np.floor(share).astype(np.int64)
    short = N - int(counts.sum())
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def record_times(sim: SimConfig):
    """Recording grid of the mean-field run: every ``stride`` steps plus ``T``."""
    steps = np.arange(0, sim.nsteps + 1, sim.stride)
    if steps[-1] != sim.nsteps:
        steps = np.append(steps, sim.nsteps)
    return steps * sim.dt


def simulate_agents(config: AgentSimConfig, backend=None) -> Trajectory:
    """Run the finite-population model; deterministic under ``config.seed``."""
    sim = config.sim
    K = kernels.get_backend(backend)
    rng = np.random.default_rng(config.seed)
    N = config.N
    rec_times = record_times(sim)
    t_end = float(rec_times[-1])
    nrec = len(rec_times)
    times = np.zeros(nrec)
    Q = np.zeros((nrec, sim.family.m))
    X = np.zeros((nrec, sim.family.n))
    packed = kernels.pack(sim.family, sim.w, sim.G.entries, sim.protocol.theta, sim.M)
    eta_t, eta_v = sim.eta_arrays()
    q = np.array(sim.q0, dtype=float)
    counts = initial_counts(sim.x0, sim.M, N)
    clock = np.array([0.0, rng.standard_exponential() / N])
    cursor = np.zeros(2, dtype=np.int64)
    events = 0
    while True:
        gaps = rng.standard_exponential(CHUNK)
        u_agent = rng.random(CHUNK)
        u_new = rng.random(CHUNK)
        cursor[1] = 0
        status = K.integrate_agents(*packed, eta_t, eta_v, q, counts, N, clock, cursor, t_end,
                                    float(sim.dt), Q_BOUND, CLAMP_TOL, rec_times, times, Q, X,
                                    gaps, u_agent, u_new)
        events += int(cursor[1])
        if status != 1:
            break
    if status == -1:
        raise IntegrationInstabilityError(
            f"q clamp beyond {CLAMP_TOL:g} near t = {clock[0]:.6g}; use a smaller dt", None, float(clock[0]), None)
    if status == -3:
        raise UnboundedTrajectoryError(f"q left the bound {Q_BOUND:g} near t = {clock[0]:.6g}",
                                       None, float(clock[0]), None)
    P = Q @ sim.G.entries.T
    etas = np.array([sim.eta_at(t) for t in times]) if sim.eta_schedule else None
    S = storage_series(P, X, sim.protocol, sim.M, etas)
    meta = {
        "config": sim.to_dict(),
        "N": N,
        "seed": config.seed,
        "events": events,
        "backend": backend or kernels.BACKEND,
    }
    return Trajectory(times, Q, X, P, S, None, meta)
