"""Dense network, tape discipline, Adam, and serialization."""

import numpy as np
import pytest

from causalflow.errors import ContractError, TrainingAbort
from causalflow.numerics import (
    AdamState,
    DenseNet,
    Layer,
    activation_names,
    adam_step,
    finite_difference_grads,
    net_from_dict,
    net_to_dict,
)


def _random_net(rng, widths=None, final="identity"):
    widths = widths or [3, 8, 5, 2]
    return DenseNet.create(widths, rng, final_activation=final)


def _scalar_loss(net, x):
    # a smooth nonlinear reduction so every parameter matters
    out = net.forward(x)
    return float(np.sum(np.sin(out) + 0.5 * out**2))


def _loss_grads(net, x):
    out, tape = net.forward_with_tape(x)
    return net.backward(tape, np.cos(out) + out)


class TestGradients:
    @pytest.mark.parametrize("hidden_act", activation_names())
    @pytest.mark.parametrize("widths", [[2, 4, 1], [3, 8, 5, 2], [1, 3, 3, 3, 1]])
    def test_matches_finite_differences(self, hidden_act, widths):
        rng = np.random.default_rng(abs(hash((hidden_act, tuple(widths)))) % 2**32)
        net = DenseNet.create(widths, rng, hidden_activation=hidden_act)
        x = rng.normal(size=(7, widths[0]))
        analytic, _ = _loss_grads(net, x)
        numeric = finite_difference_grads(lambda: _scalar_loss(net, x), net.parameters())
        for a, n in zip(analytic, numeric):
            denom = np.maximum(np.abs(n), 1e-8)
            assert np.max(np.abs(a - n) / denom) < 1e-4

    def test_input_gradient(self):
        rng = np.random.default_rng(3)
        net = _random_net(rng)
        x = rng.normal(size=(4, 3))
        _, gx = _loss_grads(net, x)
        h = 1e-6
        num = np.zeros_like(x)
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                xp, xm = x.copy(), x.copy()
                xp[i, j] += h
                xm[i, j] -= h
                num[i, j] = (_scalar_loss(net, xp) - _scalar_loss(net, xm)) / (2 * h)
        np.testing.assert_allclose(gx, num, rtol=1e-5, atol=1e-7)

    def test_masked_connections_are_inert(self):
        """Zeroed mask entries contribute nothing to the forward pass and
        get exactly zero gradient, whatever the weight array holds."""
        rng = np.random.default_rng(4)
        mask = (rng.uniform(size=(6, 3)) > 0.5).astype(float)
        net = DenseNet.create([3, 6, 2], rng, masks=[mask, None])
        x = rng.normal(size=(5, 3))
        ref = net.forward(x)
        # poison the frozen entries; evaluation must not change
        net.layers[0].weights[mask == 0] = 1e6
        np.testing.assert_array_equal(net.forward(x), ref)
        grads, _ = _loss_grads(net, x)
        assert np.all(grads[0][mask == 0] == 0.0)


class TestTapeDiscipline:
    def test_double_backward_rejected(self):
        rng = np.random.default_rng(5)
        net = _random_net(rng)
        out, tape = net.forward_with_tape(rng.normal(size=(2, 3)))
        net.backward(tape, np.ones_like(out))
        with pytest.raises(ContractError, match="consumed"):
            net.backward(tape, np.ones_like(out))

    def test_stale_tape_rejected(self):
        rng = np.random.default_rng(6)
        net = _random_net(rng)
        x = rng.normal(size=(2, 3))
        out, tape = net.forward_with_tape(x)
        net.forward_with_tape(x)
        with pytest.raises(ContractError, match="stale"):
            net.backward(tape, np.ones_like(out))

    def test_foreign_tape_rejected(self):
        rng = np.random.default_rng(7)
        net_a, net_b = _random_net(rng), _random_net(rng)
        out, tape = net_a.forward_with_tape(rng.normal(size=(2, 3)))
        with pytest.raises(ContractError, match="different net"):
            net_b.backward(tape, np.ones_like(out))

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(8)
        net = _random_net(rng)
        _, tape = net.forward_with_tape(rng.normal(size=(2, 3)))
        with pytest.raises(ContractError):
            net.backward(tape, np.ones((3, 2)))


class TestAdam:
    def test_first_step_matches_hand_calc(self):
        # with zero state, one bias-corrected step moves by ~lr*sign(g)
        p = np.array([1.0, -2.0])
        g = np.array([0.5, -3.0])
        state = AdamState.for_params([p])
        adam_step([p], [g], state, lr=0.1)
        expected = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p, expected, rtol=1e-9)
        assert state.step == 1

    def test_converges_on_quadratic(self):
        p = np.array([5.0, -4.0, 3.0])
        state = AdamState.for_params([p])
        for _ in range(2000):
            adam_step([p], [2.0 * p], state, lr=0.05)
        assert np.max(np.abs(p)) < 1e-3

    def test_nonfinite_gradient_aborts(self):
        p = np.zeros(2)
        state = AdamState.for_params([p])
        with pytest.raises(TrainingAbort, match="layer0.weights"):
            adam_step([p], [np.array([1.0, np.nan])], state, names=["layer0.weights"])

    def test_shape_mismatch_is_contract_error(self):
        p = np.zeros(2)
        state = AdamState.for_params([p])
        with pytest.raises(ContractError):
            adam_step([p], [np.zeros(3)], state)


class TestSerialization:
    def test_round_trip_is_exact(self):
        rng = np.random.default_rng(9)
        net = _random_net(rng, widths=[4, 7, 3])
        clone = net_from_dict(net_to_dict(net))
        x = rng.normal(size=(6, 4))
        np.testing.assert_array_equal(net.forward(x), clone.forward(x))
        for a, b in zip(net.parameters(), clone.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_masked_net_requires_masks_on_load(self):
        rng = np.random.default_rng(10)
        mask = np.ones((4, 3))
        mask[0, 0] = 0.0
        net = DenseNet.create([3, 4, 2], rng, masks=[mask, None])
        d = net_to_dict(net)
        with pytest.raises(ContractError, match="mask"):
            net_from_dict(d)
        clone = net_from_dict(d, masks=[mask, None])
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(net.forward(x), clone.forward(x))

    def test_json_safe_floats(self):
        import json

        rng = np.random.default_rng(11)
        net = _random_net(rng, widths=[2, 3, 1])
        blob = json.dumps(net_to_dict(net))
        clone = net_from_dict(json.loads(blob))
        np.testing.assert_array_equal(
            net.layers[0].weights, clone.layers[0].weights
        )


def test_layer_validation():
    with pytest.raises(ContractError):
        Layer(weights=np.ones((2, 3)), bias=np.ones(3))
    with pytest.raises(ContractError):
        Layer(weights=np.ones((2, 3)), bias=np.ones(2), activation="relu6")
    with pytest.raises(ContractError):
        DenseNet([])


def test_mask_applied_at_construction():
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    layer = Layer(weights=np.full((2, 2), 3.0), bias=np.zeros(2), mask=mask)
    np.testing.assert_array_equal(layer.weights, 3.0 * mask)
