"""
Marking for the product of primal and dual estimators.

All strategies select a set ``M`` with

    2 theta eta^2 zeta^2 <= eta(M)^2 zeta^2 + zeta(M)^2 eta^2

where ``theta = vartheta^2`` for strategy ``a`` and ``vartheta^2 / 2``
for ``b`` and ``c``. Ties are broken by descending value, then ascending
element index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("a", "b", "c")


@dataclass(frozen=True)
class MarkingConfig:
    strategy: str = "a"
    vartheta: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown marking strategy {self.strategy!r}")
        if not 0.0 < self.vartheta <= 1.0:
            raise ValueError("vartheta must lie in (0, 1]")

    @property
    def theta(self) -> float:
        if self.strategy == "a":
            return self.vartheta ** 2
        return self.vartheta ** 2 / 2


def _descending(values):
    # stable sort keeps ascending index among equal values
    return np.argsort(-values, kind="stable")


def doerfler_min_set(values, fraction):
    """Smallest set ``M`` with ``sum(values[M]) >= fraction * sum(values)``.

    ``values`` are nonnegative squared indicators.
    """
    values = np.asarray(values, dtype=float)
    total = values.sum()
    if not total > 0:
        raise ValueError("total estimator is zero; nothing to mark")
    order = _descending(values)
    cumulative = np.cumsum(values[order])
    n = int(np.searchsorted(cumulative, fraction * total, side="left")) + 1
    return np.sort(order[:min(n, len(values))])


def _squared(ind):
    return np.asarray(getattr(ind, "squared", ind), dtype=float)


def mark(eta, zeta, config: MarkingConfig):
    """Marked elements for the primal and dual indicators ``eta``, ``zeta``."""
    eta2, zeta2 = _squared(eta), _squared(zeta)
    eta_tot, zeta_tot = eta2.sum(), zeta2.sum()
    if not (eta_tot > 0 and zeta_tot > 0):
        raise ValueError("estimator totals must be positive")
    fraction = config.vartheta ** 2
    if config.strategy == "a":
        rho2 = eta2 * zeta_tot + eta_tot * zeta2
        return doerfler_min_set(rho2, fraction)
    mu = doerfler_min_set(eta2, fraction)
    mz = doerfler_min_set(zeta2, fraction)
    if config.strategy == "b":
        return mu if len(mu) <= len(mz) else mz
    n = min(len(mu), len(mz))
    top_u = mu[_descending(eta2[mu])[:n]]
    top_z = mz[_descending(zeta2[mz])[:n]]
    return np.union1d(top_u, top_z)


def verify_marking(eta, zeta, theta, marked) -> bool:
    eta2, zeta2 = _squared(eta), _squared(zeta)
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    eta_tot, zeta_tot = eta2.sum(), zeta2.sum()
    lhs = 2 * theta * eta_tot * zeta_tot
    rhs = eta2[marked].sum() * zeta_tot + zeta2[marked].sum() * eta_tot
    return bool(lhs <= rhs * (1 + 1e-12))
