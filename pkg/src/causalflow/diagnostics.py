"""Calibration diagnostics for conditional outcome models.

Rank statistics: for each held-out record, the rank of the observed
outcome among n posterior draws is uniform on {0..n} when the model is
calibrated. The chi-square test uses exact per-bin masses because n+1
integer ranks generally do not divide evenly into the histogram bins.

Coverage: central credible intervals from sample quantiles should cover
the observed outcome at their nominal rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError


@dataclass
class SbcResult:
    ranks: np.ndarray
    n_draws: int
    n_bins: int
    counts: np.ndarray
    expected: np.ndarray
    statistic: float
    p_value: float


@dataclass
class CoverageResult:
    levels: np.ndarray
    coverage: np.ndarray
    n_records: int
    n_draws: int


def rank_bin_masses(n_draws: int, n_bins: int) -> np.ndarray:
    """Probability each bin receives under exact rank uniformity."""
    if n_bins < 1 or n_bins > n_draws + 1:
        raise ConfigError("need 1 <= n_bins <= n_draws + 1")
    ranks = np.arange(n_draws + 1)
    bins = (ranks * n_bins) // (n_draws + 1)
    return np.bincount(bins, minlength=n_bins) / (n_draws + 1)


def sbc_check(
    model,
    y: np.ndarray,
    x: np.ndarray,
    n_draws: int = 200,
    n_bins: int = 20,
    rng: np.random.Generator | None = None,
) -> SbcResult:
    """`model` is any object with sample_rows(x, n, rng) -> (m, n)."""
    if rng is None:
        rng = np.random.default_rng(0)
    y = np.asarray(y, dtype=np.float64).ravel()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    masses = rank_bin_masses(n_draws, n_bins)
    if y.size == 0:
        return SbcResult(
            ranks=np.zeros(0, dtype=int), n_draws=n_draws, n_bins=n_bins,
            counts=np.zeros(n_bins, dtype=int), expected=np.zeros(n_bins),
            statistic=float("nan"), p_value=float("nan"),
        )
    draws = model.sample_rows(x, n_draws, rng)
    ranks = (draws < y[:, None]).sum(axis=1)
    bins = (ranks * n_bins) // (n_draws + 1)
    counts = np.bincount(bins, minlength=n_bins)
    expected = masses * y.size
    statistic, p_value = stats.chisquare(counts, f_exp=expected)
    return SbcResult(
        ranks=ranks, n_draws=n_draws, n_bins=n_bins, counts=counts,
        expected=expected, statistic=float(statistic), p_value=float(p_value),
    )


def coverage_check(
    model,
    y: np.ndarray,
    x: np.ndarray,
    levels: tuple[float, ...] = (0.5, 0.8, 0.9, 0.95),
    n_draws: int = 1000,
    rng: np.random.Generator | None = None,
) -> CoverageResult:
    """Empirical coverage of central credible intervals, one draw matrix
    shared across levels."""
    if rng is None:
        rng = np.random.default_rng(0)
    levels_arr = np.asarray(levels, dtype=np.float64)
    if np.any((levels_arr <= 0) | (levels_arr >= 1)):
        raise ConfigError("coverage levels must be inside (0, 1)")
    y = np.asarray(y, dtype=np.float64).ravel()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if y.size == 0:
        return CoverageResult(
            levels=levels_arr, coverage=np.full(levels_arr.shape, np.nan),
            n_records=0, n_draws=n_draws,
        )
    draws = model.sample_rows(x, n_draws, rng)
    cov = np.empty_like(levels_arr)
    for i, gamma in enumerate(levels_arr):
        lo = np.quantile(draws, (1.0 - gamma) / 2.0, axis=1)
        hi = np.quantile(draws, (1.0 + gamma) / 2.0, axis=1)
        cov[i] = float(np.mean((y >= lo) & (y <= hi)))
    return CoverageResult(
        levels=levels_arr, coverage=cov, n_records=y.size, n_draws=n_draws
    )


def sbc_to_csv(result: SbcResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "count", "expected"])
        for b in range(result.n_bins):
            w.writerow([b, int(result.counts[b]), f"{result.expected[b]:.6f}"])
        w.writerow(["p_value", f"{result.p_value:.6g}", ""])


def coverage_to_csv(result: CoverageResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "coverage", "n_records"])
        for level, cov in zip(result.levels, result.coverage):
            w.writerow([f"{level:.4f}", f"{cov:.6f}", result.n_records])
