"""Dense feed-forward networks with hand-written reverse-mode gradients.

Everything downstream (flow conditioners, masked autoregressive layers)
is built from `DenseNet`, so gradient correctness is checked here once
against central finite differences and the rest of the package composes
exact chain rules on top.

No general autodiff: each forward has a matching backward, and a
`GradientTape` records the intermediate values a single backward needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingAbort

FORMAT_VERSION = 1

# Derivatives are written in terms of the activated output, which is all
# the tape stores.
_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "identity": (lambda p: p, lambda a: np.ones_like(a)),
}


def activation_names() -> tuple[str, ...]:
    return tuple(_ACTIVATIONS)


@dataclass
class Layer:
    """One affine + activation block. `mask` (0/1, same shape as weights)
    freezes the zeroed connections; masked weights stay exactly zero."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ContractError("layer expects 2-D weights and 1-D bias")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ContractError(
                f"bias width {self.bias.shape[0]} != output width {self.weights.shape[0]}"
            )
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64)
            if self.mask.shape != self.weights.shape:
                raise ContractError("mask shape must match weights")
            self.weights = self.weights * self.mask

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]


@dataclass
class GradientTape:
    """Forward record for one backward pass.

    `inputs[i]` / `outputs[i]` are the batch input and activated output of
    layer i. A tape is tied to the forward call that produced it and is
    single-use; reuse after another forward (or after backward) raises.
    """

    net: "DenseNet"
    forward_id: int
    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)
    consumed: bool = False


class DenseNet:
    """A stack of `Layer`s with explicit forward/backward."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ContractError("DenseNet needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_width != nxt.in_width:
                raise ContractError(
                    f"layer widths do not chain: {prev.out_width} -> {nxt.in_width}"
                )
        self.layers = layers
        self._forward_id = 0

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    @classmethod
    def create(
        cls,
        widths: list[int],
        rng: np.random.Generator,
        hidden_activation: str = "tanh",
        final_activation: str = "identity",
        masks: list[np.ndarray | None] | None = None,
    ) -> "DenseNet":
        """Uniform(-1, 1)/sqrt(fan_in) weights, zero biases."""
        if len(widths) < 2:
            raise ContractError("need at least input and output widths")
        if masks is not None and len(masks) != len(widths) - 1:
            raise ContractError("one mask slot per layer")
        layers = []
        for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
            last = i == len(widths) - 2
            w = rng.uniform(-1.0, 1.0, size=(n_out, n_in)) / np.sqrt(n_in)
            layers.append(
                Layer(
                    weights=w,
                    bias=np.zeros(n_out),
                    activation=final_activation if last else hidden_activation,
                    mask=None if masks is None else masks[i],
                )
            )
        return cls(layers)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ContractError(
                f"expected input width {self.in_width}, got shape {x.shape}"
            )
        return x

    @staticmethod
    def _effective_weights(layer: Layer) -> np.ndarray:
        # masked connections are structurally inert, whatever the entries hold
        if layer.mask is None:
            return layer.weights
        return layer.weights * layer.mask

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Pure evaluation; accepts (d,) or (n, d), returns matching rank."""
        single = np.asarray(x).ndim == 1
        a = self._check_input(x)
        for layer in self.layers:
            act, _ = _ACTIVATIONS[layer.activation]
            a = act(a @ self._effective_weights(layer).T + layer.bias)
        return a[0] if single else a

    def forward_with_tape(self, x: np.ndarray) -> tuple[np.ndarray, GradientTape]:
        a = self._check_input(x)
        self._forward_id += 1
        tape = GradientTape(net=self, forward_id=self._forward_id)
        for layer in self.layers:
            tape.inputs.append(a)
            act, _ = _ACTIVATIONS[layer.activation]
            a = act(a @ self._effective_weights(layer).T + layer.bias)
            tape.outputs.append(a)
        return a, tape

    def backward(
        self, tape: GradientTape, output_grad: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """Returns (param_grads aligned with `parameters()`, input_grad).

        The tape must come from this net's immediately preceding
        `forward_with_tape` call and can be used once.
        """
        if tape.net is not self:
            raise ContractError("tape belongs to a different net")
        if tape.consumed:
            raise ContractError("tape already consumed")
        if tape.forward_id != self._forward_id:
            raise ContractError("stale tape: another forward ran since")
        tape.consumed = True
        g = np.asarray(output_grad, dtype=np.float64)
        if g.shape != tape.outputs[-1].shape:
            raise ContractError(
                f"output_grad shape {g.shape} != forward output {tape.outputs[-1].shape}"
            )
        param_grads: list[np.ndarray] = [np.empty(0)] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            _, dact = _ACTIVATIONS[layer.activation]
            g_pre = g * dact(tape.outputs[i])
            dw = g_pre.T @ tape.inputs[i]
            if layer.mask is not None:
                dw *= layer.mask
            param_grads[2 * i] = dw
            param_grads[2 * i + 1] = g_pre.sum(axis=0)
            g = g_pre @ self._effective_weights(layer)
        return param_grads, g

    def parameters(self) -> list[np.ndarray]:
        """Live arrays, updated in place by the optimizer."""
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def parameter_names(self) -> list[str]:
        out = []
        for i in range(len(self.layers)):
            out.append(f"layer{i}.weights")
            out.append(f"layer{i}.bias")
        return out

    def check_finite(self) -> None:
        for name, p in zip(self.parameter_names(), self.parameters()):
            if not np.all(np.isfinite(p)):
                raise TrainingAbort(f"non-finite values in {name}")


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter array."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: list[str] | None = None,
) -> None:
    """One bias-corrected Adam update, in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params/grads/state lengths differ")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ContractError(f"grad {i} shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names is not None else f"parameter {i}"
            raise TrainingAbort(f"non-finite gradient in {label}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def finite_difference_grads(
    loss_fn, params: list[np.ndarray], h: float = 1e-5
) -> list[np.ndarray]:
    """Central differences on every coordinate. Slow; test oracle only."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            hi = loss_fn()
            p[idx] = orig - h
            lo = loss_fn()
            p[idx] = orig
            g[idx] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def net_to_dict(net: DenseNet) -> dict:
    """JSON-ready description. Masks are not stored; callers that use
    masked layers rebuild them from their own architecture record and
    pass them to `net_from_dict`."""
    return {
        "format_version": FORMAT_VERSION,
        "widths": [net.in_width] + [layer.out_width for layer in net.layers],
        "activations": [layer.activation for layer in net.layers],
        "masked": [layer.mask is not None for layer in net.layers],
        "arrays": [
            {
                "weights": [repr(float(v)) for v in layer.weights.ravel()],
                "bias": [repr(float(v)) for v in layer.bias.ravel()],
            }
            for layer in net.layers
        ],
    }


def net_from_dict(d: dict, masks: list[np.ndarray | None] | None = None) -> DenseNet:
    if d.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported net format {d.get('format_version')!r}")
    widths = d["widths"]
    n_layers = len(widths) - 1
    if masks is None:
        masks = [None] * n_layers
    if len(masks) != n_layers:
        raise ContractError("one mask slot per layer")
    if any(d["masked"][i] and masks[i] is None for i in range(n_layers)):
        raise ContractError("serialized net had masks; caller must supply them")
    layers = []
    for i in range(n_layers):
        n_in, n_out = widths[i], widths[i + 1]
        arr = d["arrays"][i]
        w = np.array([float(v) for v in arr["weights"]]).reshape(n_out, n_in)
        b = np.array([float(v) for v in arr["bias"]])
        layers.append(
            Layer(weights=w, bias=b, activation=d["activations"][i], mask=masks[i])
        )
    return DenseNet(layers)
