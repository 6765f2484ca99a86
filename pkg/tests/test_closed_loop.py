import math
from dataclasses import replace

import numpy as np
import pytest

from taskalloc.closed_loop import (
    PayoffMatrix,
    SimConfig,
    Trajectory,
    equilibrium_residual,
    simulate,
    step,
)
from taskalloc.errors import ConfigurationError, IntegrationInstabilityError, UnboundedTrajectoryError
from taskalloc.presets import reference_config
from taskalloc.protocol import ProtocolParams

# 20 ln(3.75 / 3.25): root of 3.5 tanh(q / 40) = 0.25
SCALAR_LIMIT = 2.862016872813467


@pytest.fixture(scope="module")
def sos_run(pairs):
    cfg, pair = reference_config("resource_sum_of_squares", pair=pairs["resource_sum_of_squares"])
    return cfg, pair, simulate(cfg)


def test_payoff_matrix_patterns(hs):
    with pytest.raises(ConfigurationError):
        PayoffMatrix(np.array([[1.0, 0.1], [0.0, 1.0]]), "diagonal")
    G = PayoffMatrix.neighbor_shared([1.0, 0.5, 0.3, 0.2], hs)
    assert G.entries[0, 0] == G.entries[1, 0] == G.entries[2, 0] == 1.0
    bad = G.entries.copy()
    bad[1, 0] = 0.9
    with pytest.raises(ConfigurationError):
        PayoffMatrix(bad, "neighbor_shared", hs.neighbors)
    with pytest.raises(ConfigurationError):
        PayoffMatrix(np.array([[np.nan]]))


def test_config_validation(rc, w_rc):
    prm = ProtocolParams(np.full(4, 0.25), 1e-4)
    G = PayoffMatrix(np.eye(4), "diagonal")
    with pytest.raises(ConfigurationError):
        SimConfig(rc, w_rc, G, prm, np.zeros(4), np.full(4, 0.3))
    with pytest.raises(ConfigurationError):
        SimConfig(rc, w_rc, G, prm, np.zeros(4), np.full(4, 0.25), T=1.0, dt=2.0)
    with pytest.raises(ConfigurationError):
        SimConfig(rc, w_rc, PayoffMatrix(np.eye(3)), prm, np.zeros(4), np.full(4, 0.25))


def test_equilibrium_is_fixed(pairs, references):
    fam, w, _, G = references["resource_max_norm"]
    pair = pairs["resource_max_norm"]
    cfg = SimConfig(fam, w, G, ProtocolParams(pair.x, 1e-4), pair.q, pair.x, T=1.0)
    q, x = step((pair.q, pair.x), cfg)
    assert np.max(np.abs(q - pair.q)) <= 1e-10
    assert np.max(np.abs(x - pair.x)) <= 1e-10
    assert equilibrium_residual((pair.q, pair.x), cfg) <= 1e-10
    traj = simulate(replace(cfg, T=5.0))
    assert np.max(np.abs(traj.q - pair.q)) <= 1e-9


def test_zero_growth_relaxes_to_prior(rc):
    theta = np.array([0.1, 0.2, 0.3, 0.4])
    cfg = SimConfig(rc, np.zeros(4), PayoffMatrix(np.eye(4), "diagonal"), ProtocolParams(theta, 0.5),
                    np.zeros(4), np.full(4, 0.25), T=20.0, dt=1e-2, stride=10)
    traj = simulate(cfg)
    assert np.all(traj.q == 0)
    expected = theta + (0.25 - theta) * math.exp(-20.0)
    assert np.allclose(traj.x[-1], expected, atol=1e-9)


def test_scalar_limit(scalar_rc):
    cfg = SimConfig(scalar_rc, [0.25], PayoffMatrix(np.eye(1)), ProtocolParams([1.0], 1e-4),
                    [0.0], [1.0], T=400.0, dt=1e-2, stride=1000)
    traj = simulate(cfg)
    assert np.all(traj.x == 1.0)
    assert traj.q[-1, 0] == pytest.approx(SCALAR_LIMIT, abs=1e-8)


def test_residual_at_zero_levels(rc, w_rc):
    cfg = SimConfig(rc, w_rc, PayoffMatrix(np.eye(4), "diagonal"), ProtocolParams(np.full(4, 0.25), 1e-4),
                    np.zeros(4), np.full(4, 0.25))
    assert equilibrium_residual((np.zeros(4), np.full(4, 0.25)), cfg) >= w_rc.min()


def test_reference_run_invariants(sos_run):
    cfg, pair, traj = sos_run
    assert np.max(np.abs(traj.x.sum(axis=1) - 1.0)) <= 1e-9
    assert traj.q.min() >= -1e-12
    assert traj.metadata["max_clamp"] <= 1e-9
    assert np.all(np.diff(traj.times) > 0)
    assert traj.times[-1] == pytest.approx(100.0)


def test_reference_run_terminal_residual(sos_run):
    # measured on the reference start (q*, uniform); still relaxing along the slow level mode
    cfg, _, traj = sos_run
    r = equilibrium_residual((traj.q[-1], traj.x[-1]), cfg)
    assert r == pytest.approx(2.04e-4, rel=0.05)


def test_step_halving(sos_run):
    cfg, _, traj = sos_run
    fine = simulate(replace(cfg, dt=cfg.dt / 2, stride=2 * cfg.stride))
    assert np.max(np.abs(fine.x[-1] - traj.x[-1])) <= 1e-6


def test_large_step_is_rejected(rc, w_rc, pairs):
    pair = pairs["resource_sum_of_squares"]
    cfg = SimConfig(rc, w_rc, PayoffMatrix(np.eye(4), "diagonal"), ProtocolParams(pair.x, 1e-4),
                    pair.q, np.full(4, 0.25), T=50.0, dt=5.0, stride=1)
    with pytest.raises(IntegrationInstabilityError) as info:
        simulate(cfg)
    assert info.value.step is not None


def test_unbounded_levels(rc):
    cfg = SimConfig(rc, np.full(4, 1e5), PayoffMatrix(np.eye(4), "diagonal"),
                    ProtocolParams(np.full(4, 0.25), 1.0), np.zeros(4), np.full(4, 0.25), T=100.0, dt=1e-2)
    with pytest.raises(UnboundedTrajectoryError):
        simulate(cfg)


def test_eta_schedule(rc, w_rc, pairs):
    pair = pairs["resource_sum_of_squares"]
    base = SimConfig(rc, w_rc, PayoffMatrix(np.eye(4), "diagonal"), ProtocolParams(pair.x, 1e-4),
                     pair.q, np.full(4, 0.25), T=2.0, eta_schedule=((1.0, 1.0),))
    assert base.eta_at(0.5) == 1e-4 and base.eta_at(1.5) == 1.0
    with pytest.raises(ConfigurationError):
        replace(base, eta_schedule=((1.0, 1.0), (0.5, 2.0)))
    a = simulate(base)
    b = simulate(replace(base, eta_schedule=()))
    k = np.searchsorted(a.times, 1.0)
    assert np.array_equal(a.x[: k + 1], b.x[: k + 1])
    assert not np.allclose(a.x[-1], b.x[-1])


def test_pinned_population(rc, w_rc, pairs):
    pair = pairs["resource_sum_of_squares"]
    cfg = SimConfig(rc, w_rc, PayoffMatrix(np.eye(4), "diagonal"), ProtocolParams(pair.x, 1e-4),
                    np.zeros(4), pair.x, T=5.0, pin_x=True)
    traj = simulate(cfg)
    assert np.all(traj.x == pair.x)


def test_csv_round_trip(tmp_path, sos_run):
    _, _, traj = sos_run
    short = Trajectory(traj.times[:5], traj.q[:5], traj.x[:5], traj.p[:5], traj.S[:5], None, {"k": 1})
    short.write(tmp_path)
    raw = (tmp_path / "trajectory.csv").read_bytes()
    assert raw.startswith(b"t,q_1,q_2,q_3,q_4,x_1,x_2,x_3,x_4,p_1,p_2,p_3,p_4,S,L\r\n")
    assert raw.count(b"\r\n") == 6
    back = Trajectory.read_csv(tmp_path / "trajectory.csv", 4, 4)
    assert np.array_equal(back.q, short.q) and np.array_equal(back.x, short.x)
    assert back.L is None
    assert (tmp_path / "metadata.json").read_text().strip().startswith("{")
