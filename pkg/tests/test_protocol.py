import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskalloc.errors import ConfigurationError, DomainError
from taskalloc.passivity import storage_by_maximization
from taskalloc.protocol import ProtocolParams, delta_storage, edm_field, kl_divergence, revision_target

HALF = ProtocolParams(np.array([0.5, 0.5]), 1.0)
P_LN2 = np.array([math.log(2.0), 0.0])


def test_params_validation():
    with pytest.raises(ConfigurationError):
        ProtocolParams(np.array([0.5, 0.5]), 0.0)
    with pytest.raises(ConfigurationError):
        ProtocolParams(np.array([-0.1, 1.1]), 1.0)


def test_kl_examples():
    assert kl_divergence(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0
    assert kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(math.log(2), rel=1e-15)
    with pytest.raises(DomainError):
        kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0]))


def test_revision_target_examples():
    theta = np.array([0.1, 0.2, 0.3, 0.4])
    assert np.allclose(revision_target(np.zeros(4), ProtocolParams(theta, 0.3)), theta, rtol=1e-15)
    assert np.allclose(revision_target(P_LN2, HALF), [2 / 3, 1 / 3], rtol=1e-15)
    pinned = ProtocolParams(np.array([0.0, 1.0, 0.0]), 1e-3)
    r = revision_target(np.array([5.0, -3.0, 100.0]), pinned)
    assert r[0] == 0.0 and r[2] == 0.0 and r.sum() == 1.0


def test_revision_target_extreme_temperature():
    theta = np.full(5, 0.2)
    p = np.array([1e4, -1e4, 0.0, 9999.0, 1e4 - 1e-3])
    r = revision_target(p, ProtocolParams(theta, 1e-6), 2.0)
    assert np.all(np.isfinite(r))
    assert r.sum() == pytest.approx(2.0, abs=1e-12)
    assert r[0] == pytest.approx(2.0, abs=1e-12)


def test_edm_examples():
    assert np.allclose(edm_field(P_LN2, np.array([0.5, 0.5]), HALF), [1 / 6, -1 / 6], atol=1e-15)
    theta = np.array([0.2, 0.3, 0.5])
    prm = ProtocolParams(theta, 0.01)
    assert np.max(np.abs(edm_field(np.zeros(3), theta, prm))) <= 1e-15
    p = np.array([0.3, -0.2, 0.1])
    assert np.max(np.abs(edm_field(p, revision_target(p, prm), prm))) <= 1e-15


def test_storage_examples():
    x = np.array([0.5, 0.5])
    # ln 1.5 - 0.5 ln 2
    assert delta_storage(P_LN2, x, HALF) == pytest.approx(0.05889151782819172, abs=1e-14)
    prm = ProtocolParams(np.array([0.2, 0.8]), 0.7)
    y = np.array([0.6, 0.4])
    assert delta_storage(np.zeros(2), y, prm) == pytest.approx(0.7 * kl_divergence(y, prm.theta), rel=1e-13)
    p = np.array([0.1, 0.4])
    assert abs(delta_storage(p, revision_target(p, prm), prm)) <= 1e-15


def _random_case(rng, n, eta):
    theta = rng.dirichlet(np.ones(n))
    p = rng.uniform(-1, 1, n)
    x = rng.dirichlet(np.ones(n))
    return ProtocolParams(theta, eta), p, x


def test_mass_conservation_and_invariance():
    rng = np.random.default_rng(7)
    for k in range(1000):
        M = rng.uniform(0.5, 3)
        n = rng.integers(2, 8)
        theta = M * rng.dirichlet(np.ones(n))
        prm = ProtocolParams(theta, 10 ** rng.uniform(-4, 1))
        x = M * rng.dirichlet(np.ones(n))
        x[rng.integers(n)] = 0.0
        x *= M / x.sum()
        p = rng.uniform(-5, 5, n)
        f = edm_field(p, x, prm, M)
        assert abs(f.sum()) <= 1e-12 * M
        assert np.all(f[x == 0] >= 0)


def test_storage_positive_and_zero_iff_fixed_point():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        prm, p, x = _random_case(rng, int(rng.integers(2, 7)), 10 ** rng.uniform(-2, 1))
        s = delta_storage(p, x, prm)
        assert s >= -1e-12
        if np.max(np.abs(edm_field(p, x, prm))) > 1e-6:
            assert s > 0
        # at the fixed point the storage vanishes
        assert abs(delta_storage(p, revision_target(p, prm), prm)) <= 1e-9


def test_equilibrium_payoff_bound():
    # build (p*, x*) as a fixed point with theta = x*: x* = softmax(log x* + p/eta) needs equal p on the support
    rng = np.random.default_rng(9)
    for _ in range(100):
        n = 5
        x_star = rng.dirichlet(np.ones(n))
        eta = 10 ** rng.uniform(-4, 0)
        p = np.full(n, rng.uniform(-1, 1))
        prm = ProtocolParams(x_star, eta)
        # rounding of log(theta) + p / eta limits the fixed point to ~ eps * |p| / eta
        assert np.max(np.abs(edm_field(p, x_star, prm))) <= 1e-12
        kappa = np.log(x_star.max() / x_star)
        assert np.all(p >= p.max() - eta * kappa)


def test_small_temperature_selects_best():
    theta = np.array([0.1, 0.2, 0.3, 0.4])
    prm = ProtocolParams(theta, 1e-4)
    p = np.array([0.0, 0.5, 0.4, 0.45])
    target = revision_target(p, prm)
    supported = target > 1e-12
    assert np.all(p[supported] >= p.max() - 1e-2)


@pytest.mark.parametrize("eta", [1e-4, 1e-2, 1.0])
def test_storage_matches_maximization_oracle(eta):
    rng = np.random.default_rng(10)
    for _ in range(50):
        prm, p, x = _random_case(rng, 4, eta)
        assert delta_storage(p, x, prm) == pytest.approx(storage_by_maximization(p, x, prm), abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(p=arrays(np.float64, 4, elements=st.floats(-50, 50)),
       raw=arrays(np.float64, 4, elements=st.floats(0.01, 1)),
       logeta=st.floats(-6, 1))
def test_target_is_distribution(p, raw, logeta):
    prm = ProtocolParams(raw / raw.sum(), 10 ** logeta)
    r = revision_target(p, prm)
    assert np.all(r >= 0) and np.all(np.isfinite(r))
    assert abs(r.sum() - 1.0) <= 1e-12
