"""Fixed (non-trainable) pieces of the flow stack: the standard-normal
base density, covariate standardization, and the outcome pre-transform.

Both transforms carry their log-Jacobians so every `log_prob` in the
package is a density in raw data units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

LOG_2PI = float(np.log(2.0 * np.pi))


def normal_logpdf_rows(z: np.ndarray) -> np.ndarray:
    """Standard-normal log density summed across columns; (n, d) -> (n,)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return -0.5 * (z.shape[1] * LOG_2PI + np.sum(z * z, axis=1))


def normal_logpdf(z: np.ndarray) -> np.ndarray:
    """Scalar standard-normal log density, elementwise."""
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * (LOG_2PI + z * z)


@dataclass
class Standardizer:
    """Per-column z-scoring with an optional log pre-transform.

    Columns flagged in `log_mask` are mapped through log(x) first, so
    heavy-tailed covariates (income, population) become roughly Gaussian
    before standardization. log-Jacobian terms from those columns are
    x-dependent and included in `transform_with_logdet`.
    """

    mean: np.ndarray
    scale: np.ndarray
    log_mask: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.log_mask = np.asarray(self.log_mask, dtype=bool)
        if not (self.mean.shape == self.scale.shape == self.log_mask.shape):
            raise ConfigError("standardizer field shapes differ")
        if np.any(self.scale <= 0):
            raise ConfigError("standardizer scales must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def fit(cls, x: np.ndarray, log_mask: np.ndarray | None = None) -> "Standardizer":
        """Population moments (ddof=0) of the pre-transformed columns."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = x.shape[1]
        mask = np.zeros(d, dtype=bool) if log_mask is None else np.asarray(log_mask, bool)
        t = cls._pre(x, mask)
        mean = t.mean(axis=0)
        scale = t.std(axis=0)
        if np.any(scale <= 0):
            cols = np.nonzero(scale <= 0)[0].tolist()
            raise ConfigError(f"zero variance in column(s) {cols}; cannot standardize")
        return cls(mean=mean, scale=scale, log_mask=mask)

    @staticmethod
    def _pre(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
        if mask.any():
            bad = x[:, mask] <= 0
            if np.any(bad):
                raise ConfigError("non-positive value in a log-transformed column")
        t = x.copy()
        t[:, mask] = np.log(t[:, mask])
        return t

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return (self._pre(x, self.log_mask) - self.mean) / self.scale

    def transform_with_logdet(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (u, logdet rows) with logdet = log|du/dx| per sample."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = self.transform(x)
        ld = np.full(x.shape[0], -float(np.sum(np.log(self.scale))))
        if self.log_mask.any():
            ld = ld - np.sum(np.log(x[:, self.log_mask]), axis=1)
        return u, ld

    def inverse(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        t = u * self.scale + self.mean
        x = t.copy()
        x[:, self.log_mask] = np.exp(t[:, self.log_mask])
        return x

    def to_dict(self) -> dict:
        return {
            "mean": [repr(float(v)) for v in self.mean],
            "scale": [repr(float(v)) for v in self.scale],
            "log_mask": [bool(v) for v in self.log_mask],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(
            mean=np.array([float(v) for v in d["mean"]]),
            scale=np.array([float(v) for v in d["scale"]]),
            log_mask=np.array(d["log_mask"], dtype=bool),
        )


@dataclass
class OutcomeTransform:
    """Scalar outcome pre-transform: optional log(1 + y/c) then z-score.

    `log1p` compresses the heavy right tail of dollar-denominated
    outcomes while keeping y = 0 finite; c sets the dollar scale at
    which the compression bends. `identity` is for outcomes that are
    already roughly Gaussian.
    """

    kind: str
    mean: float
    scale: float
    c: float = 1000.0

    def __post_init__(self):
        if self.kind not in ("log1p", "identity"):
            raise ConfigError(f"unknown outcome transform {self.kind!r}")
        if self.scale <= 0:
            raise ConfigError("outcome scale must be positive")
        if self.kind == "log1p" and self.c <= 0:
            raise ConfigError("log1p scale c must be positive")

    @classmethod
    def fit(cls, y: np.ndarray, kind: str = "log1p", c: float = 1000.0) -> "OutcomeTransform":
        y = np.asarray(y, dtype=np.float64)
        if kind == "log1p":
            if c <= 0:
                raise ConfigError("log1p scale c must be positive")
            if np.any(y <= -c):
                raise ConfigError(f"outcome values must exceed -c = {-c}")
            t = np.log1p(y / c)
        elif kind == "identity":
            t = y
        else:
            raise ConfigError(f"unknown outcome transform {kind!r}")
        scale = float(t.std())
        if scale <= 0:
            raise ConfigError("outcome has zero variance; cannot standardize")
        return cls(kind=kind, mean=float(t.mean()), scale=scale, c=c)

    def forward(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (u, logdet rows) with logdet = log|du/dy|."""
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "log1p":
            if np.any(y <= -self.c):
                raise ConfigError(f"outcome values must exceed -c = {-self.c}")
            u = (np.log1p(y / self.c) - self.mean) / self.scale
            ld = -np.log(self.scale) - np.log(self.c + y)
        else:
            u = (y - self.mean) / self.scale
            ld = np.full(y.shape, -np.log(self.scale))
        return u, ld

    def inverse(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        t = u * self.scale + self.mean
        if self.kind == "log1p":
            return self.c * np.expm1(t)
        return t

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "mean": repr(float(self.mean)),
            "scale": repr(float(self.scale)),
            "c": repr(float(self.c)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeTransform":
        return cls(
            kind=d["kind"],
            mean=float(d["mean"]),
            scale=float(d["scale"]),
            c=float(d["c"]),
        )
