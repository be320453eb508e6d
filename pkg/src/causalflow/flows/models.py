"""Flow models: joint covariate density, conditional outcome density,
and the equal-weight ensemble used for inference.

All log-probabilities are in raw data units (standardization and
outcome-transform Jacobians included), so thresholds and comparisons
across models are meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from ..errors import ConfigError, ContractError
from .base import OutcomeTransform, Standardizer, normal_logpdf, normal_logpdf_rows
from .made import MadeAffineLayer, ReverseLayer
from .spline import SplineTransform

ENSEMBLE_SIZE = 5  # equal-weight mixture of the top validation models

# sampling is chunked so transient per-draw parameter gathers stay small
_CHUNK_DRAWS = 200_000


class DensityFlow:
    """Masked autoregressive flow over the covariate vector.

    Layers map data to latent; `log_prob` is the change-of-variables sum
    plus the standard-normal base. An empty layer list is valid and
    reduces the model to a standardized Gaussian.
    """

    def __init__(self, standardizer: Standardizer, layers: list):
        self.standardizer = standardizer
        self.layers = list(layers)
        for layer in self.layers:
            if getattr(layer, "dim", standardizer.dim) != standardizer.dim:
                raise ContractError("layer dimension != standardizer dimension")

    @property
    def dim(self) -> int:
        return self.standardizer.dim

    @classmethod
    def create(
        cls,
        standardizer: Standardizer,
        n_transforms: int,
        hidden_widths: list[int],
        rng: np.random.Generator,
    ) -> "DensityFlow":
        layers: list = []
        for i in range(n_transforms):
            if i > 0:
                layers.append(ReverseLayer(standardizer.dim))
            layers.append(MadeAffineLayer.create(standardizer.dim, hidden_widths, rng))
        return cls(standardizer, layers)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        """(n, d) raw covariates -> (n,) log density in raw units."""
        v, ld = self.standardizer.transform_with_logdet(x)
        for layer in self.layers:
            v, step = layer.forward(v)
            ld = ld + step
        return normal_logpdf_rows(v) + ld

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        for layer in reversed(self.layers):
            z = layer.inverse(z)
        return self.standardizer.inverse(z)

    def nll_and_grads(self, x: np.ndarray) -> tuple[float, list[np.ndarray]]:
        """Mean negative log-likelihood and grads aligned with parameters()."""
        n = x.shape[0]
        v, ld = self.standardizer.transform_with_logdet(x)
        caches = []
        for layer in self.layers:
            v, step, cache = layer.forward_train(v)
            ld = ld + step
            caches.append(cache)
        nll = -float(np.mean(normal_logpdf_rows(v) + ld))
        gz = v / n
        gl = np.full(n, -1.0 / n)
        rev_grads = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            pg, gz = layer.backward_train(cache, gz, gl)
            rev_grads.append(pg)
        grads: list[np.ndarray] = []
        for pg in reversed(rev_grads):
            grads.extend(pg)
        return nll, grads

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def parameter_names(self) -> list[str]:
        out: list[str] = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.parameter_names(prefix=f"layer{i}."))
        return out

    def check_finite(self) -> None:
        for layer in self.layers:
            if hasattr(layer, "net"):
                layer.net.check_finite()


class ConditionalFlow:
    """Spline-stack density q(y | x) over the raw scalar outcome."""

    def __init__(
        self,
        cov_standardizer: Standardizer,
        outcome_transform: OutcomeTransform,
        transforms: list[SplineTransform],
    ):
        for t in transforms:
            if t.conditioner.in_width != cov_standardizer.dim:
                raise ContractError("conditioner input width != covariate dimension")
        self.cov_standardizer = cov_standardizer
        self.outcome_transform = outcome_transform
        self.transforms = list(transforms)

    @classmethod
    def create(
        cls,
        cov_standardizer: Standardizer,
        outcome_transform: OutcomeTransform,
        n_transforms: int,
        n_bins: int,
        hidden_widths: list[int],
        rng: np.random.Generator,
    ) -> "ConditionalFlow":
        transforms = [
            SplineTransform.create(
                cov_standardizer.dim, n_bins, hidden_widths, rng
            )
            for _ in range(n_transforms)
        ]
        return cls(cov_standardizer, outcome_transform, transforms)

    def _check_xy(self, y: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y = np.asarray(y, dtype=np.float64).ravel()
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[0] != y.shape[0]:
            raise ContractError(f"{y.shape[0]} outcomes vs {x.shape[0]} covariate rows")
        return y, x

    def log_prob(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """log q(y | x) in raw outcome units; y (n,), x (n, d)."""
        y, x = self._check_xy(y, x)
        u_cov = self.cov_standardizer.transform(x)
        u, ld = self.outcome_transform.forward(y)
        for t in self.transforms:
            u, step = t.forward(u, u_cov)
            ld = ld + step
        return normal_logpdf(u) + ld

    def sample_at_rows(
        self, x: np.ndarray, rows: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        """One outcome draw per entry of `rows` (indices into x)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u_cov = self.cov_standardizer.transform(x)
        raws = [t.raw_params(u_cov) for t in self.transforms]
        u = rng.standard_normal(rows.shape[0])
        for t, (tw, th, td) in zip(reversed(self.transforms), reversed(raws)):
            u, _ = t.inverse_from_params(u, tw[rows], th[rows], td[rows])
        return self.outcome_transform.inverse(u)

    def sample(self, x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """n draws from q(. | x) for a single covariate vector."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        u_cov = self.cov_standardizer.transform(x)
        u = rng.standard_normal(n)
        for t in reversed(self.transforms):
            tw, th, td = t.raw_params(u_cov)
            u, _ = t.inverse_from_params(u, tw, th, td)  # one param row, broadcast
        return self.outcome_transform.inverse(u)

    def sample_rows(self, x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """(m, d) covariates -> (m, n) draws, n per row, chunked."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        m = x.shape[0]
        step = max(1, _CHUNK_DRAWS // max(1, n))
        out = np.empty((m, n))
        for lo in range(0, m, step):
            hi = min(lo + step, m)
            rows = np.repeat(np.arange(hi - lo), n)
            out[lo:hi] = self.sample_at_rows(x[lo:hi], rows, rng).reshape(hi - lo, n)
        return out

    def nll_and_grads(self, y: np.ndarray, x: np.ndarray) -> tuple[float, list[np.ndarray]]:
        y, x = self._check_xy(y, x)
        n = y.shape[0]
        u_cov = self.cov_standardizer.transform(x)
        u, ld = self.outcome_transform.forward(y)
        caches = []
        for t in self.transforms:
            u, step, cache = t.forward_train(u, u_cov)
            ld = ld + step
            caches.append(cache)
        nll = -float(np.mean(normal_logpdf(u) + ld))
        gu = u / n
        gl = np.full(n, -1.0 / n)
        rev_grads = []
        for t, cache in zip(reversed(self.transforms), reversed(caches)):
            pg, gu = t.backward_train(cache, gu, gl)
            rev_grads.append(pg)
        grads: list[np.ndarray] = []
        for pg in reversed(rev_grads):
            grads.extend(pg)
        return nll, grads

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for t in self.transforms:
            out.extend(t.parameters())
        return out

    def parameter_names(self) -> list[str]:
        out: list[str] = []
        for i, t in enumerate(self.transforms):
            out.extend(t.parameter_names(prefix=f"transform{i}."))
        return out

    def check_finite(self) -> None:
        for t in self.transforms:
            t.conditioner.check_finite()


class FlowEnsemble:
    """Equal-weight mixture of conditional flows.

    log q(y|x) = logsumexp_j log q_j(y|x) - log(n_members). Sampling
    picks a member uniformly per draw.
    """

    def __init__(self, members: list, required_members: int = ENSEMBLE_SIZE):
        if len(members) != required_members:
            raise ConfigError(
                f"ensemble needs exactly {required_members} members, got {len(members)}"
            )
        self.members = list(members)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def log_prob(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        stacked = np.stack([m.log_prob(y, x) for m in self.members])
        return logsumexp(stacked, axis=0) - np.log(self.n_members)

    def sample(self, x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        return self.sample_rows(x, n, rng)[0]

    def sample_rows(self, x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """(m, d) covariates -> (m, n) draws, n per row, chunked."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        m = x.shape[0]
        step = max(1, _CHUNK_DRAWS // max(1, n))
        out = np.empty((m, n))
        for lo in range(0, m, step):
            hi = min(lo + step, m)
            chunk = x[lo:hi]
            idx = rng.integers(0, self.n_members, size=(hi - lo, n))
            block = np.empty((hi - lo, n))
            for j, member in enumerate(self.members):
                mask = idx == j
                if not mask.any():
                    continue
                rows = np.nonzero(mask)[0]
                block[mask] = member.sample_at_rows(chunk, rows, rng)
            out[lo:hi] = block
        return out
