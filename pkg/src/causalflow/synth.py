"""Synthetic community data with known ground truth.

Covariates come from a two-component Gaussian mixture in latent space,
mapped coordinate-wise onto the record schema (exp for dollar/count
scales, logistic for fractions), so the exact joint density is
available for benchmarking the learned flows.

Outcomes are additive on the model's pre-transformed scale:
t = m(x) + T*tau(x) + sigma*eps with eps ~ N(0,1), then y = g_inv(t).
That keeps tau(x) in closed form; the USD-scale effect
E[Y(1) - Y(0) | x] is recovered by Gauss-Hermite quadrature over eps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import multivariate_normal

from .data import COVARIATES, CommunityRecord
from .errors import ConfigError, SamplingError

_DIM = len(COVARIATES)

# latent mixture: two moderately separated components, common covariance
_MIX_SHIFT = 0.6
_MIX_RHO = 0.3

# coordinate maps latent z -> raw covariate, all strictly monotone
_COV_MAPS: dict[str, tuple[str, float, float]] = {
    # name: (kind, scale_or_center, rate)
    "precipitation_mm": ("exp", 900.0, 0.35),
    "flood_risk": ("logistic", -0.5, 0.8),
    "median_income": ("exp", 55_000.0, 0.35),
    "population": ("exp", 10_000.0, 0.8),
    "renter_frac": ("logistic", 0.0, 0.7),
    "edu_frac": ("logistic", 0.2, 0.6),
    "diversity_frac": ("logistic", -1.0, 0.9),
}

_HERMITE_NODES, _HERMITE_WEIGHTS = np.polynomial.hermite_e.hermegauss(64)
_HERMITE_WEIGHTS = _HERMITE_WEIGHTS / np.sqrt(2.0 * np.pi)


def _mixture_params() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu1 = np.full(_DIM, -_MIX_SHIFT)
    mu2 = np.full(_DIM, _MIX_SHIFT)
    cov = (1.0 - _MIX_RHO) * np.eye(_DIM) + _MIX_RHO * np.ones((_DIM, _DIM))
    return mu1, mu2, cov


def _map_latent(z: np.ndarray) -> np.ndarray:
    x = np.empty_like(z)
    for j, name in enumerate(COVARIATES):
        kind, a, b = _COV_MAPS[name]
        if kind == "exp":
            x[:, j] = a * np.exp(b * z[:, j])
        else:
            x[:, j] = expit(a + b * z[:, j])
    return x


def _unmap(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse coordinate maps and per-sample log|dz/dx|."""
    z = np.empty_like(x)
    ld = np.zeros(x.shape[0])
    for j, name in enumerate(COVARIATES):
        kind, a, b = _COV_MAPS[name]
        v = x[:, j]
        if kind == "exp":
            z[:, j] = np.log(v / a) / b
            ld -= np.log(b * v)
        else:
            z[:, j] = (np.log(v / (1.0 - v)) - a) / b
            ld -= np.log(b * v * (1.0 - v))
    return z, ld


def sample_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
    mu1, mu2, cov = _mixture_params()
    chol = np.linalg.cholesky(cov)
    comp = rng.integers(0, 2, size=n)
    eps = rng.standard_normal((n, _DIM))
    z = np.where(comp[:, None] == 0, mu1, mu2) + eps @ chol.T
    return _map_latent(z)


def covariate_logpdf(x: np.ndarray) -> np.ndarray:
    """Exact log density of the covariate sampler, raw units."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu1, mu2, cov = _mixture_params()
    z, ld = _unmap(x)
    lp = logsumexp(
        np.stack(
            [
                multivariate_normal.logpdf(z, mean=mu1, cov=cov),
                multivariate_normal.logpdf(z, mean=mu2, cov=cov),
            ]
        ),
        axis=0,
    ) - np.log(2.0)
    return lp + ld


@dataclass(frozen=True)
class SynthProcess:
    """A data-generating process with closed-form pieces.

    baseline/tau act on raw covariates (n, 7) and return pre-scale
    values; outcome_kind chooses g (identity or y = c*(exp(t)-1)).
    """

    name: str
    baseline: Callable[[np.ndarray], np.ndarray]
    tau: Callable[[np.ndarray], np.ndarray]
    noise_scale: float
    outcome_kind: str = "identity"
    outcome_c: float = 1000.0
    treated_fraction: float = 0.5
    outreach_shift: float | None = None

    def g_inverse(self, t: np.ndarray) -> np.ndarray:
        if self.outcome_kind == "log1p":
            return self.outcome_c * np.expm1(t)
        return t

    def g_forward(self, y: np.ndarray) -> np.ndarray:
        if self.outcome_kind == "log1p":
            return np.log1p(y / self.outcome_c)
        return y


def true_cate(process: SynthProcess, x: np.ndarray) -> np.ndarray:
    """E[Y(1) - Y(0) | x] in outcome (USD) units via 64-node quadrature."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    m = process.baseline(x)
    t = process.tau(x)
    if process.outcome_kind == "identity":
        return t

    def expect(center: np.ndarray) -> np.ndarray:
        grid = center[:, None] + process.noise_scale * _HERMITE_NODES[None, :]
        return (process.g_inverse(grid) * _HERMITE_WEIGHTS).sum(axis=1)

    return expect(m + t) - expect(m)


def outcome_logpdf(process: SynthProcess, y: np.ndarray, x: np.ndarray, treated: bool) -> np.ndarray:
    """Exact conditional outcome log density for one arm, raw units."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    mu = process.baseline(x) + (process.tau(x) if treated else 0.0)
    t = process.g_forward(y)
    s = process.noise_scale
    lp = -0.5 * np.log(2.0 * np.pi) - np.log(s) - 0.5 * ((t - mu) / s) ** 2
    if process.outcome_kind == "log1p":
        lp = lp - np.log(process.outcome_c + y)
    return lp


def _records_from_arrays(
    x: np.ndarray, y: np.ndarray, treated: np.ndarray,
    outreach: bool = False, zip_start: int = 10_000,
) -> list[CommunityRecord]:
    records = []
    for i in range(x.shape[0]):
        records.append(
            CommunityRecord(
                zip=f"{zip_start + i:05d}",
                treated=bool(treated[i]),
                outreach_only=outreach,
                claims_per_policy=float(y[i]),
                **{name: float(x[i, j]) for j, name in enumerate(COVARIATES)},
            )
        )
    return records


def generate(process: SynthProcess, n: int, seed: int) -> list[CommunityRecord]:
    """n records with randomized assignment at `treated_fraction`."""
    rng = np.random.default_rng([seed, 1])
    x = sample_covariates(n, rng)
    treated = rng.random(n) < process.treated_fraction
    t = process.baseline(x) + treated * process.tau(x) + process.noise_scale * rng.standard_normal(n)
    y = process.g_inverse(t)
    return _records_from_arrays(x, y, treated)


def generate_outreach(process: SynthProcess, n: int, seed: int) -> list[CommunityRecord]:
    """Outreach-flagged records: in the program, but outcomes follow the
    control law plus the process's outreach shift."""
    if process.outreach_shift is None:
        raise ConfigError(f"process {process.name!r} has no outreach shift")
    rng = np.random.default_rng([seed, 2])
    x = sample_covariates(n, rng)
    t = process.baseline(x) + process.noise_scale * rng.standard_normal(n)
    y = process.g_inverse(t) + process.outreach_shift
    return _records_from_arrays(
        x, y, np.ones(n, dtype=bool), outreach=True, zip_start=70_000
    )


def in_box(x: np.ndarray, box: dict[str, tuple[float, float]]) -> np.ndarray:
    """Row mask: inside every interval of the box (axis name -> (lo, hi))."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mask = np.ones(x.shape[0], dtype=bool)
    for name, (lo, hi) in box.items():
        if name not in COVARIATES:
            raise ConfigError(f"unknown covariate {name!r} in box")
        col = x[:, COVARIATES.index(name)]
        mask &= (col >= lo) & (col <= hi)
    return mask


def generate_with_hole(
    process: SynthProcess, n: int, box: dict[str, tuple[float, float]], seed: int,
    max_batches: int = 1000,
) -> list[CommunityRecord]:
    """Like generate(), but covariates inside `box` are rejected, carving
    a hole out of the covariate support."""
    rng = np.random.default_rng([seed, 3])
    kept: list[np.ndarray] = []
    total = 0
    for _ in range(max_batches):
        batch = sample_covariates(max(n, 256), rng)
        keep = batch[~in_box(batch, box)]
        kept.append(keep)
        total += keep.shape[0]
        if total >= n:
            break
    else:
        raise SamplingError(
            f"could not draw {n} records outside the box in {max_batches} batches"
        )
    x = np.concatenate(kept)[:n]
    treated = rng.random(n) < process.treated_fraction
    t = process.baseline(x) + treated * process.tau(x) + process.noise_scale * rng.standard_normal(n)
    y = process.g_inverse(t)
    return _records_from_arrays(x, y, treated)


# --- canonical processes ---

_INC = COVARIATES.index("median_income")
_PRECIP = COVARIATES.index("precipitation_mm")
_FLOOD = COVARIATES.index("flood_risk")
_RENT = COVARIATES.index("renter_frac")

LINEAR_SLOPE_USD_PER_MM = 3.0
_PRECIP_CENTER = 900.0


def _usd_baseline(x: np.ndarray) -> np.ndarray:
    # smooth, bounded away from zero so claims stay positive
    return (
        15_000.0
        + 3_000.0 * x[:, _FLOOD]
        + 1_500.0 * np.tanh((x[:, _INC] - 55_000.0) / 30_000.0)
        + 1_000.0 * x[:, _RENT]
    )


def constant_effect_process(tau_usd: float = 5_000.0, noise_usd: float = 2_000.0) -> SynthProcess:
    """Identity outcome scale; CATE(x) = tau_usd everywhere."""
    return SynthProcess(
        name="constant",
        baseline=_usd_baseline,
        tau=lambda x: np.full(x.shape[0], tau_usd),
        noise_scale=noise_usd,
        outcome_kind="identity",
        outreach_shift=9_780.0,
    )


def linear_effect_process(
    slope: float = LINEAR_SLOPE_USD_PER_MM, intercept_usd: float = 2_000.0,
    noise_usd: float = 2_000.0,
) -> SynthProcess:
    """Identity outcome scale; CATE is linear in precipitation with the
    given USD-per-mm slope."""
    return SynthProcess(
        name="linear",
        baseline=_usd_baseline,
        tau=lambda x: intercept_usd + slope * (x[:, _PRECIP] - _PRECIP_CENTER),
        noise_scale=noise_usd,
        outcome_kind="identity",
    )


def interaction_effect_process(noise_pre: float = 0.2, c: float = 1_000.0) -> SynthProcess:
    """log1p outcome scale; the effect interacts flood risk with income,
    so the USD CATE is nonlinear and needs the quadrature."""

    def baseline(x: np.ndarray) -> np.ndarray:
        return (
            2.0
            + 0.5 * x[:, _FLOOD]
            + 0.3 * np.log(x[:, _INC] / 55_000.0)
        )

    def tau(x: np.ndarray) -> np.ndarray:
        need = expit(-(x[:, _INC] - 55_000.0) / 15_000.0)
        return 0.05 + 0.5 * x[:, _FLOOD] * need

    return SynthProcess(
        name="interaction",
        baseline=baseline,
        tau=tau,
        noise_scale=noise_pre,
        outcome_kind="log1p",
        outcome_c=c,
    )


PROCESSES = {
    "constant": constant_effect_process,
    "linear": linear_effect_process,
    "interaction": interaction_effect_process,
}


def get_process(name: str, **kwargs) -> SynthProcess:
    if name not in PROCESSES:
        raise ConfigError(f"unknown process {name!r}; choices: {sorted(PROCESSES)}")
    return PROCESSES[name](**kwargs)
