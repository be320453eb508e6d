"""Masked autoregressive layers for the joint covariate density.

A MADE conditioner predicts per-dimension shift/log-scale from the
preceding dimensions only; connectivity is enforced with binary masks
built from degree assignments. Stacked layers alternate with order
reversals so every dimension eventually conditions on every other.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from ..numerics import DenseNet
from .base import normal_logpdf_rows

# log-scales are clamped to keep exp() well-conditioned during training
LOG_SCALE_CLAMP = 7.0


def made_degrees(dim: int, hidden_widths: list[int]) -> list[np.ndarray]:
    """Input degrees 1..dim; hidden degrees cycle over 1..dim-1."""
    if dim < 1:
        raise ContractError("dim must be >= 1")
    degrees = [np.arange(1, dim + 1)]
    for h in hidden_widths:
        if dim == 1:
            degrees.append(np.ones(h, dtype=int))
        else:
            degrees.append(np.arange(h) % (dim - 1) + 1)
    return degrees


def made_masks(dim: int, hidden_widths: list[int]) -> list[np.ndarray]:
    """Masks for a conditioner mapping dim inputs -> (shift, log-scale).

    Hidden connections need out-degree >= in-degree; the output layer is
    strict (>) so unit i never sees inputs >= i. Output rows are the two
    stacked blocks [shift_1..shift_dim, scale_1..scale_dim].
    """
    degrees = made_degrees(dim, hidden_widths)
    masks = []
    for d_in, d_out in zip(degrees, degrees[1:]):
        masks.append((d_out[:, None] >= d_in[None, :]).astype(np.float64))
    out_deg = np.tile(np.arange(1, dim + 1), 2)
    masks.append((out_deg[:, None] > degrees[-1][None, :]).astype(np.float64))
    return masks


class MadeAffineLayer:
    """One autoregressive affine transform v -> z.

    Data-to-latent is parallel: z_i = (v_i - mu_i(v_<i)) * exp(-s_i(v_<i)),
    logdet = -sum_i s_i. Latent-to-data is sequential in i.
    """

    def __init__(self, net: DenseNet, dim: int, hidden_widths: list[int]):
        if net.in_width != dim or net.out_width != 2 * dim:
            raise ContractError("conditioner must map dim -> 2*dim")
        self.net = net
        self.dim = dim
        self.hidden_widths = list(hidden_widths)

    @classmethod
    def create(cls, dim: int, hidden_widths: list[int], rng: np.random.Generator) -> "MadeAffineLayer":
        masks = made_masks(dim, hidden_widths)
        net = DenseNet.create(
            [dim] + list(hidden_widths) + [2 * dim], rng=rng, masks=masks
        )
        return cls(net, dim, hidden_widths)

    def _shift_scale(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mu = out[:, : self.dim]
        s_raw = out[:, self.dim :]
        s = np.clip(s_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        return mu, s, s_raw

    def forward(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu, s, _ = self._shift_scale(self.net.forward(v))
        z = (v - mu) * np.exp(-s)
        return z, -s.sum(axis=1)

    def forward_train(self, v: np.ndarray):
        out, tape = self.net.forward_with_tape(v)
        mu, s, s_raw = self._shift_scale(out)
        e = np.exp(-s)
        z = (v - mu) * e
        cache = (tape, v, mu, e, s_raw)
        return z, -s.sum(axis=1), cache

    def backward_train(self, cache, gz: np.ndarray, glogdet: np.ndarray):
        """Returns (param grads, grad w.r.t. v). glogdet is per-row."""
        tape, v, mu, e, s_raw = cache
        g_mu = -gz * e
        # z depends on s through exp(-s); logdet contributes -1 per dim
        g_s = -gz * (v - mu) * e - glogdet[:, None]
        g_s = g_s * (np.abs(s_raw) < LOG_SCALE_CLAMP)
        g_out = np.concatenate([g_mu, g_s], axis=1)
        param_grads, g_v_net = self.net.backward(tape, g_out)
        return param_grads, gz * e + g_v_net

    def inverse(self, z: np.ndarray) -> np.ndarray:
        """Sequential inversion: dimension i needs v_<i already filled."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        v = np.zeros_like(z)
        for i in range(self.dim):
            mu, s, _ = self._shift_scale(self.net.forward(v))
            v[:, i] = z[:, i] * np.exp(s[:, i]) + mu[:, i]
        return v

    def parameters(self) -> list[np.ndarray]:
        return self.net.parameters()

    def parameter_names(self, prefix: str = "") -> list[str]:
        return [f"{prefix}{n}" for n in self.net.parameter_names()]


class ReverseLayer:
    """Fixed order reversal between autoregressive layers; volume-free."""

    def __init__(self, dim: int):
        self.dim = dim
        self.perm = np.arange(dim)[::-1].copy()

    def forward(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return v[:, self.perm], np.zeros(v.shape[0])

    def forward_train(self, v: np.ndarray):
        return v[:, self.perm], np.zeros(v.shape[0]), None

    def backward_train(self, cache, gz: np.ndarray, glogdet: np.ndarray):
        inv = np.argsort(self.perm)
        return [], gz[:, inv]

    def inverse(self, z: np.ndarray) -> np.ndarray:
        inv = np.argsort(self.perm)
        return z[:, inv]

    def parameters(self) -> list[np.ndarray]:
        return []

    def parameter_names(self, prefix: str = "") -> list[str]:
        return []
