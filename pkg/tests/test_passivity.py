import math
from dataclasses import replace

import numpy as np
import pytest

from taskalloc.closed_loop import PayoffMatrix, SimConfig, Trajectory, simulate
from taskalloc.design import design_G, sample_constraints
from taskalloc.errors import ConfigurationError, GInfeasibleError
from taskalloc.model import RateFamily, reduction_rate, solve_g
from taskalloc.passivity import (
    QuadratureSpec,
    antistorage,
    antistorage_dissipation_gap,
    antistorage_series,
    lyapunov_monitor,
    storage_dissipation_gap,
)
from taskalloc.presets import reference_config
from taskalloc.protocol import ProtocolParams


@pytest.fixture(scope="module")
def certified(references, pairs, design_samples):
    """Certified (family, w, G) triples: identity for max-norm plus two LP designs."""
    out = [references["resource_max_norm"][:2] + (PayoffMatrix(np.eye(4), "diagonal"),)]
    for name, structure in (("resource_sum_of_squares", "diagonal"), ("sensing_balanced", "neighbor_shared")):
        fam, w, _, _ = references[name]
        rep = design_G(design_samples[name], structure, pairs[name], fam, w)
        assert rep.passed
        out.append((fam, w, rep.G))
    return out


def test_quadrature_spec():
    with pytest.raises(ConfigurationError):
        QuadratureSpec(1)
    t, wt = QuadratureSpec(5).rule()
    assert wt.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.all((t > 0) & (t < 1))


def test_antistorage_examples(scalar_rc, rc, w_rc):
    q = np.array([20 * math.log(1.8)])
    L = antistorage(q, np.array([0.5]), np.eye(1), scalar_rc, np.array([0.25]))
    assert L == pytest.approx(0.03125, abs=1e-14)
    q = np.array([15.0, 40.0, 80.0, 120.0])
    assert antistorage(q, solve_g(rc, q, w_rc), np.eye(4), rc, w_rc) == 0.0


def test_antistorage_requires_profile(hs):
    with pytest.raises(GInfeasibleError):
        antistorage(np.array([0.05, 200.0, 200.0, 200.0]), np.full(6, 1 / 6), np.eye(6, 4), hs,
                    np.array([2.0, 0.01, 0.01, 0.01]))


def test_antistorage_non_negative(certified):
    for k, (fam, w, G) in enumerate(certified):
        samples = sample_constraints(fam, w, 1.0, 1000, seed=100 + k, budget_factor=25)
        for s in samples:
            assert antistorage(s.q, s.x, G, fam, w, y=s.y) >= -1e-10


def test_antistorage_zero_iff_rates_match(certified):
    rng = np.random.default_rng(21)
    for fam, w, G in certified:
        for s in sample_constraints(fam, w, 1.0, 200, seed=7, budget_factor=25):
            # on the solution set F = w the integral vanishes
            assert abs(antistorage(s.q, s.y, G, fam, w, y=s.y)) <= 1e-9
            gap = np.max(np.abs(reduction_rate(fam, s.q, s.x) - w))
            if gap > 1e-3:
                assert antistorage(s.q, s.x, G, fam, w, y=s.y) > 1e-9
        # along a ray towards g(q) L shrinks quadratically, so small rate gaps give tiny L
        s = sample_constraints(fam, w, 1.0, 1, seed=int(rng.integers(1000)), budget_factor=25)[0]
        Ls = [antistorage(s.q, s.y + h * (s.x - s.y), G, fam, w, y=s.y) for h in (1e-1, 1e-2)]
        if Ls[0] > 0:
            assert Ls[1] == pytest.approx(Ls[0] * 1e-2, rel=1e-6)


@pytest.mark.parametrize("beta,tol", [(1.0, 1e-10), (0.5, 1e-8), (2.0, 1e-8)])
def test_quadrature_convergence(beta, tol):
    fam = RateFamily.resource_collection(3.5, 0.05, beta, m=4)
    w = np.array([0.05, 0.25, 1.0, 2.0]) * 0.3
    rng = np.random.default_rng(22)
    for _ in range(100):
        q = np.exp(rng.uniform(math.log(1.0), math.log(200), 4))
        try:
            y = solve_g(fam, q, w)
        except GInfeasibleError:
            continue
        x = rng.dirichlet(np.ones(4))
        a = antistorage(q, x, np.eye(4), fam, w, QuadratureSpec(16), y=y)
        b = antistorage(q, x, np.eye(4), fam, w, QuadratureSpec(32), y=y)
        assert abs(a - b) <= tol


@pytest.fixture(scope="module")
def short_run(pairs):
    cfg, _ = reference_config("resource_sum_of_squares", T=2.0, stride=1, pair=pairs["resource_sum_of_squares"])
    return cfg, simulate(cfg)


def test_dissipation_inequalities(short_run):
    cfg, traj = short_run
    assert storage_dissipation_gap(traj, cfg) <= 1e-5
    assert antistorage_dissipation_gap(traj, cfg) <= 1e-5


def test_antistorage_series_marks_undefined(rc, w_rc):
    cfg = SimConfig(rc, w_rc, PayoffMatrix(np.eye(4), "diagonal"), ProtocolParams(np.full(4, 0.25), 1e-4),
                    np.zeros(4), np.full(4, 0.25))
    L = antistorage_series(np.array([np.zeros(4), np.full(4, 50.0)]), np.full((2, 4), 0.25), cfg)
    assert np.isnan(L[0]) and np.isfinite(L[1])


def test_monitor_constant_trajectory(pairs, references):
    fam, w, _, G = references["resource_max_norm"]
    pair = pairs["resource_max_norm"]
    k = 5
    traj = Trajectory(np.arange(k, dtype=float), np.tile(pair.q, (k, 1)), np.tile(pair.x, (k, 1)),
                      np.tile(G.entries @ pair.q, (k, 1)), np.zeros(k), None, {})
    rep = lyapunov_monitor(traj, G, fam, w, ProtocolParams(pair.x, 1e-4))
    assert rep.passed and rep.max_increment == 0.0 and rep.worst_index is None


def test_monitor_flags_sign_flipped_payoffs(references, pairs):
    cfg, _ = reference_config("resource_sum_of_squares", pair=pairs["resource_sum_of_squares"])
    fam, w, _, _ = references["resource_sum_of_squares"]
    bad = replace(cfg, G=PayoffMatrix(-np.eye(4), "diagonal"))
    traj = simulate(bad)
    rep = lyapunov_monitor(traj, bad.G, fam, w, bad.protocol)
    assert not rep.passed
    assert rep.n_violations > 0 and rep.max_increment > rep.tolerance
    assert rep.worst_index is not None
    assert '"passed": false' in rep.to_json()


def _power_mean(a, b, beta):
    # ∫_0^1 (τ a + (1 - τ) b)^β dτ in closed form
    return np.where(np.isclose(a, b, rtol=0, atol=1e-300), b**beta,
                    (a ** (beta + 1) - b ** (beta + 1)) / ((beta + 1) * np.where(a == b, 1.0, a - b)))


def test_fractional_exponent_against_closed_form():
    fam = RateFamily.resource_collection(3.5, 0.05, 0.5, m=4)
    w = np.array([0.05, 0.25, 1.0, 2.0]) * 0.3
    rng = np.random.default_rng(23)
    for k in range(200):
        q = np.exp(rng.uniform(0.0, math.log(200), 4))
        try:
            y = solve_g(fam, q, w)
        except GInfeasibleError:
            continue
        x = rng.dirichlet(np.ones(4))
        if k % 10 == 0:
            x[rng.integers(4)] = 0.0
        t = np.tanh(0.025 * q)
        exact = (x - y) @ (3.5 * t * _power_mean(x, y, 0.5) - w)
        assert antistorage(q, x, np.eye(4), fam, w, y=y) == pytest.approx(exact, abs=1e-10)
