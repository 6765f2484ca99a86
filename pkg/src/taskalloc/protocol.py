"""KL-divergence regularized learning (KLD-RL) revision protocol and its EDM.

A revising agent picks strategy ``i`` with probability proportional to
``theta_i * exp(p_i / eta)``, independently of its current strategy, so the
mean-field dynamics are ``dx/dt = M * softmax(log theta + p / eta) - x``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from taskalloc.errors import ConfigurationError, DomainError

__all__ = [
    "ProtocolParams",
    "kl_divergence",
    "log_partition",
    "revision_target",
    "edm_field",
    "delta_storage",
]

EXP_FLOOR = -745.0


@dataclass(frozen=True, eq=False)
class ProtocolParams:
    """Reference distribution ``theta`` (a population state) and temperature ``eta``."""

    theta: np.ndarray
    eta: float

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 1 or not np.all(np.isfinite(theta)) or np.any(theta < 0) or theta.sum() <= 0:
            raise ConfigurationError("theta must be a non-negative finite vector with positive mass")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ConfigurationError("eta must be > 0")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "eta", float(self.eta))

    @property
    def mass(self):
        return float(self.theta.sum())

    def with_eta(self, eta):
        return ProtocolParams(self.theta, eta)


def kl_divergence(x, theta) -> float:
    """``sum_i x_i ln(x_i / theta_i)`` with ``0 ln 0 = 0``.

    Raises
    ------
    DomainError
        If ``x_i > 0`` where ``theta_i == 0``.
    """
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if x.shape != theta.shape:
        raise ConfigurationError("x and theta must have the same shape")
    pos = x > 0
    if np.any(pos & (theta <= 0)):
        raise DomainError("x is not absolutely continuous with respect to theta")
    return float(np.sum(x[pos] * np.log(x[pos] / theta[pos])))


def _log_weights(p, theta, eta):
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != theta.shape[0]:
        raise ConfigurationError("payoff and theta dimensions differ")
    with np.errstate(divide="ignore"):
        return np.log(theta) + p / eta


def log_partition(p, params: ProtocolParams):
    """``ln sum_l theta_l exp(p_l / eta)`` via a max shift; works on stacked ``p`` rows."""
    lw = _log_weights(p, params.theta, params.eta)
    top = np.max(lw, axis=-1, keepdims=True)
    return np.squeeze(top, -1) + np.log(np.sum(np.exp(np.maximum(lw - top, EXP_FLOOR)), axis=-1))


def revision_target(p, params: ProtocolParams, M=None) -> np.ndarray:
    """``M theta_i exp(p_i / eta) / sum_l theta_l exp(p_l / eta)`` in log space.

    Strategies with ``theta_i == 0`` get exactly 0.  Accepts stacked payoffs
    of shape ``(..., n)``.
    """
    M = params.mass if M is None else M
    lw = _log_weights(p, params.theta, params.eta)
    lw = lw - np.max(lw, axis=-1, keepdims=True)
    e = np.where(params.theta > 0, np.exp(np.maximum(lw, EXP_FLOOR)), 0.0)
    return M * e / np.sum(e, axis=-1, keepdims=True)


def edm_field(p, x, params: ProtocolParams, M=None) -> np.ndarray:
    """Mean-field EDM vector field; components sum to zero.

    The rounding residual of the sum is removed in proportion to ``x``, so a
    strategy with ``x_i = 0`` keeps ``dx_i = target_i >= 0`` exactly.
    """
    x = np.asarray(x, dtype=float)
    v = revision_target(p, params, M) - x
    total = np.sum(x, axis=-1, keepdims=True)
    share = np.divide(x, total, out=np.full_like(x, 1.0 / x.shape[-1]), where=total > 0)
    return v - np.sum(v, axis=-1, keepdims=True) * share


def delta_storage(p, x, params: ProtocolParams, M=None) -> float:
    """δ-storage ``max_z (p'z - eta D(z||theta)) - (p'x - eta D(x||theta))``.

    The maximum over the simplex is ``eta M ln(Z / M)`` with
    ``Z = sum_l theta_l exp(p_l / eta)``, which is attained at the revision
    target.  See ``taskalloc.passivity.storage_by_maximization`` for the
    numerical cross-check.
    """
    M = params.mass if M is None else M
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    eta = params.eta
    peak = eta * M * (log_partition(p, params) - np.log(M))
    return float(peak - (p @ x - eta * kl_divergence(x, params.theta)))
