"""Reference experiment families and their rounded reference payoff matrices.

Two families appear throughout: four independent resource-collection tasks
(``R = 3.5, α = 0.05, β = 1``) and four sensing targets covered by six
sensor configurations, each configuration observing two targets.
"""

from __future__ import annotations

import numpy as np

from taskalloc.closed_loop import PayoffMatrix, SimConfig
from taskalloc.design import MAX_NORM, SUM_OF_SQUARES, CostFunction, optimal_equilibrium
from taskalloc.model import RateFamily
from taskalloc.protocol import ProtocolParams

__all__ = [
    "RESOURCE_W",
    "SENSING_W_BALANCED",
    "SENSING_W_SKEWED",
    "SENSING_NEIGHBORS",
    "resource_family",
    "sensing_family",
    "reference_matrices",
    "reference_config",
]

RESOURCE_W = (0.05, 0.25, 1.00, 2.00)
SENSING_W_BALANCED = (0.5, 1.0, 1.5, 2.0)
SENSING_W_SKEWED = (0.1, 0.5, 1.0, 2.0)
SENSING_NEIGHBORS = ((1, 2, 3), (1, 4, 5), (2, 4, 6), (3, 5, 6))  # one-based
# the sensing designs draw ~9% feasible g(q) samples, so they get a larger redraw budget
SENSING_BUDGET_FACTOR = 25


def resource_family():
    return RateFamily.resource_collection(3.5, 0.05, 1.0, m=4)


def sensing_family():
    return RateFamily.heterogeneous_sensing(SENSING_NEIGHBORS, 6, 3.5, 0.05, 1.0, one_based=True)


def reference_matrices():
    """``{name: (family, w, cost, G)}`` for the four reference matrices."""
    rc, hs = resource_family(), sensing_family()
    return {
        "resource_sum_of_squares": (rc, np.array(RESOURCE_W), CostFunction(SUM_OF_SQUARES),
                                    PayoffMatrix(np.diag([1.00, 0.66, 0.48, 0.40]), "diagonal")),
        "resource_max_norm": (rc, np.array(RESOURCE_W), CostFunction(MAX_NORM),
                              PayoffMatrix(np.eye(4), "diagonal")),
        "sensing_balanced": (hs, np.array(SENSING_W_BALANCED), CostFunction(SUM_OF_SQUARES),
                             PayoffMatrix.neighbor_shared([1.00, 0.81, 0.72, 0.67], hs)),
        "sensing_skewed": (hs, np.array(SENSING_W_SKEWED), CostFunction(SUM_OF_SQUARES),
                           PayoffMatrix.neighbor_shared([1.68, 0.99, 0.80, 0.67], hs)),
    }


def reference_config(name, eta=1e-4, T=100.0, dt=1e-3, stride=100, pair=None, G=None):
    """Closed-loop run for a reference matrix with ``θ = x*``, started at ``(q*, uniform)``.

    Returns ``(config, pair)``; ``pair`` is computed when not supplied.
    """
    family, w, cost, G_ref = reference_matrices()[name]
    if pair is None:
        pair = optimal_equilibrium(family, w, 1.0, cost)
    G = G_ref if G is None else G
    x0 = np.full(family.n, 1.0 / family.n)
    cfg = SimConfig(family, w, G, ProtocolParams(pair.x, eta), pair.q, x0, T=T, dt=dt, stride=stride)
    return cfg, pair
