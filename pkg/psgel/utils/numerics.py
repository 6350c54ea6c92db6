"""Small numerical helpers shared by the services."""

from typing import Sequence

import numpy as np
from scipy import special, stats


def tree_mean(values: np.ndarray) -> np.ndarray:
    """Mean over the first axis with pairwise summation.

    numpy uses pairwise summation only along a contiguous axis, so the
    observations are laid out contiguously first. The result does not depend
    on thread count.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return np.add.reduce(np.ascontiguousarray(values)) / len(values)
    stacked = np.ascontiguousarray(np.moveaxis(values, 0, -1))
    return np.add.reduce(stacked, axis=-1) / values.shape[0]


def tree_outer_mean(rows: np.ndarray) -> np.ndarray:
    """(1/n) sum_i r_i r_i' with pairwise summation; symmetric by construction."""
    rows = np.asarray(rows, dtype=float)
    outer = rows[:, :, None] * rows[:, None, :]
    mean = tree_mean(outer)
    return 0.5 * (mean + mean.T)


def replication_seed(master_seed: int, index: int) -> int:
    """Independent 64-bit seed for replication ``index``."""
    sequence = np.random.SeedSequence([int(master_seed), int(index)])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def gauss_legendre(order: int, lo: float = 0.0, hi: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [lo, hi]."""
    nodes, weights = special.roots_legendre(order)
    half = 0.5 * (hi - lo)
    return lo + half * (nodes + 1.0), half * weights


def composite_gauss_legendre(
    breakpoints: Sequence[float], order: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule of the given order on every interval between breakpoints."""
    edges = np.unique(np.asarray(breakpoints, dtype=float))
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        x, wt = gauss_legendre(order, lo, hi)
        nodes.append(x)
        weights.append(wt)
    return np.concatenate(nodes), np.concatenate(weights)


def gauss_hermite_normal(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating against the standard normal density."""
    nodes, weights = special.roots_hermitenorm(order)
    return nodes, weights / np.sqrt(2.0 * np.pi)


def silverman_bandwidth(values: np.ndarray) -> float:
    """Silverman's rule of thumb for a Gaussian kernel."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    sd = np.std(values, ddof=1) if n > 1 else 0.0
    iqr = stats.iqr(values) / 1.349 if n > 1 else 0.0
    spread = min(sd, iqr) if iqr > 0 else sd
    if spread <= 0:
        spread = 1.0
    return 0.9 * spread * n ** (-0.2)


def chi2_critical_value(level: float, df: int = 1) -> float:
    """Upper critical value of chi-square at the given confidence level."""
    return float(stats.chi2.ppf(level, df))


def chi2_pvalue(statistic: float, df: int = 1) -> float:
    """Upper-tail chi-square probability."""
    return float(stats.chi2.sf(max(statistic, 0.0), df))


def normal_quantile(level: float) -> float:
    """Two-sided normal critical value z_{(1+level)/2}."""
    return float(stats.norm.ppf(0.5 * (1.0 + level)))


def central_difference(func, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """
    Jacobian of func by central differences, one column per coordinate of x.

    A scalar func gives its gradient. Steps are relative for coordinates larger than one.
    """
    x = np.asarray(x, dtype=float)
    columns = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step * max(1.0, abs(x[i]))
        up = np.asarray(func(x + e), dtype=float)
        down = np.asarray(func(x - e), dtype=float)
        columns.append((up - down) / (2.0 * e[i]))
    return np.stack(columns, axis=-1)
