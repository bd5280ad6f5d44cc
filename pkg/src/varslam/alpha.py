"""Grid-search estimation of the Barron shape parameter from residuals."""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError, NumericalError
from .kernel import BRANCH_EPS, PartitionTable, lookup_log_partition, rho


def _as_residuals(residuals) -> np.ndarray:
    e = np.asarray(residuals, dtype=float).ravel()
    if e.size == 0:
        raise InvalidArgumentError("residual set is empty")
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise InvalidArgumentError("residual magnitudes must be finite and non-negative")
    return e


def nll(residuals, alpha: float, table: PartitionTable) -> float:
    """Negative log-likelihood of whitened magnitudes under shape ``alpha`` (c = 1)."""
    e = _as_residuals(residuals)
    return e.size * lookup_log_partition(table, alpha) + float(np.sum(rho(e, alpha, 1.0)))


def nll_profile(residuals, table: PartitionTable) -> np.ndarray:
    """NLL at every grid node; non-finite entries become +inf."""
    e = _as_residuals(residuals)
    alphas = table.alphas
    x = e * e
    special = (np.abs(alphas) < BRANCH_EPS) | (np.abs(alphas - 2.0) < BRANCH_EPS)
    loss = np.empty(alphas.size)
    for i in np.flatnonzero(special):
        loss[i] = np.sum(rho(e, alphas[i], 1.0))
    # general branch for all remaining nodes at once, same formula as rho
    a = alphas[~special][:, None]
    b = np.abs(a - 2.0)
    with np.errstate(over="ignore", invalid="ignore"):
        loss[~special] = np.sum((b / a) * np.expm1(0.5 * a * np.log1p(x[None, :] / b)), axis=1)
    out = e.size * table.log_z + loss
    out[~np.isfinite(out)] = np.inf
    return out


def estimate_alpha(residuals, table: PartitionTable) -> float:
    """Grid node minimizing the NLL; ties go to the largest alpha."""
    profile = nll_profile(residuals, table)
    best = profile.min()
    if not np.isfinite(best):
        raise NumericalError("NLL is non-finite at every grid node")
    idx = np.flatnonzero(profile == best)[-1]
    return float(table.alphas[idx])
