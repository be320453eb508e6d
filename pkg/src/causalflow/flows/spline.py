"""Covariate-conditioned monotone rational-quadratic spline transform.

The scalar outcome passes through a spline whose knots come from a
dense conditioner evaluated on the standardized covariates; the heavy
per-sample math lives in `causalflow.kernels`.
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import ContractError
from ..numerics import DenseNet, Layer

DEFAULT_BOUND = 4.0
MIN_BIN = 1e-3
MIN_DERIVATIVE = 1e-3


def identity_derivative_raw(min_derivative: float = MIN_DERIVATIVE) -> float:
    """Raw value whose softplus-plus-floor equals a slope of exactly 1."""
    return float(np.log(np.expm1(1.0 - min_derivative)))


class SplineTransform:
    """One spline layer: u -> z given conditioner(u_cov).

    The conditioner outputs 3K-1 raw values per sample: K bin widths,
    K bin heights, K-1 interior derivatives. Outside [-bound, bound]
    the map is the identity.
    """

    def __init__(
        self,
        conditioner: DenseNet,
        n_bins: int,
        bound: float = DEFAULT_BOUND,
        min_bin: float = MIN_BIN,
        min_derivative: float = MIN_DERIVATIVE,
    ):
        if n_bins < 2:
            raise ContractError("need at least 2 spline bins")
        if conditioner.out_width != 3 * n_bins - 1:
            raise ContractError(
                f"conditioner must output 3*{n_bins}-1 = {3 * n_bins - 1} values,"
                f" got {conditioner.out_width}"
            )
        self.conditioner = conditioner
        self.n_bins = n_bins
        self.bound = float(bound)
        self.min_bin = float(min_bin)
        self.min_derivative = float(min_derivative)

    @classmethod
    def create(
        cls,
        n_cov: int,
        n_bins: int,
        hidden_widths: list[int],
        rng: np.random.Generator,
        bound: float = DEFAULT_BOUND,
    ) -> "SplineTransform":
        net = DenseNet.create([n_cov] + list(hidden_widths) + [3 * n_bins - 1], rng=rng)
        return cls(net, n_bins=n_bins, bound=bound)

    @classmethod
    def identity(cls, n_cov: int, n_bins: int, bound: float = DEFAULT_BOUND) -> "SplineTransform":
        """Zero-weight conditioner whose bias encodes the identity spline:
        uniform bins and unit derivatives everywhere."""
        bias = np.zeros(3 * n_bins - 1)
        bias[2 * n_bins :] = identity_derivative_raw()
        net = DenseNet(
            [Layer(np.zeros((3 * n_bins - 1, n_cov)), bias, activation="identity")]
        )
        return cls(net, n_bins=n_bins, bound=bound)

    def _split(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = self.n_bins
        return out[:, :k], out[:, k : 2 * k], out[:, 2 * k :]

    def raw_params(self, u_cov: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._split(self.conditioner.forward(np.atleast_2d(u_cov)))

    def forward(self, u: np.ndarray, u_cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tw, th, td = self.raw_params(u_cov)
        return kernels.rqs_forward(
            u, tw, th, td, self.bound, self.min_bin, self.min_derivative
        )

    def forward_from_params(self, u, tw, th, td):
        return kernels.rqs_forward(
            u, tw, th, td, self.bound, self.min_bin, self.min_derivative
        )

    def inverse_from_params(self, z, tw, th, td):
        return kernels.rqs_inverse(
            z, tw, th, td, self.bound, self.min_bin, self.min_derivative
        )

    def inverse(self, z: np.ndarray, u_cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tw, th, td = self.raw_params(u_cov)
        return self.inverse_from_params(z, tw, th, td)

    def forward_train(self, u: np.ndarray, u_cov: np.ndarray):
        out, tape = self.conditioner.forward_with_tape(u_cov)
        tw, th, td = self._split(out)
        z, ld = self.forward_from_params(u, tw, th, td)
        cache = (tape, u, tw, th, td)
        return z, ld, cache

    def backward_train(self, cache, gz: np.ndarray, glogdet: np.ndarray):
        """Returns (param grads, grad w.r.t. u). Covariates are data, so
        their gradient is dropped."""
        tape, u, tw, th, td = cache
        gu, gtw, gth, gtd = kernels.rqs_backward(
            u, tw, th, td, self.bound, self.min_bin, self.min_derivative, gz, glogdet
        )
        g_out = np.concatenate([gtw, gth, gtd], axis=1)
        param_grads, _ = self.conditioner.backward(tape, g_out)
        return param_grads, gu

    def parameters(self) -> list[np.ndarray]:
        return self.conditioner.parameters()

    def parameter_names(self, prefix: str = "") -> list[str]:
        return [f"{prefix}{n}" for n in self.conditioner.parameter_names()]
