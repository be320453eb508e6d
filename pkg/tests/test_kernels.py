"""Spline kernel contracts: both backends, gradients against finite
differences, and exact numpy/compiled parity."""

import numpy as np
import pytest

from causalflow import kernels
from causalflow.flows.spline import (
    DEFAULT_BOUND,
    MIN_BIN,
    MIN_DERIVATIVE,
    identity_derivative_raw,
)
from causalflow.kernels import numpy_impl

BOUND = DEFAULT_BOUND


def _random_params(rng, n, k, spread=1.5, shared=False):
    p = 1 if shared else n
    tw = rng.normal(scale=spread, size=(p, k))
    th = rng.normal(scale=spread, size=(p, k))
    td = rng.normal(scale=spread, size=(p, k - 1))
    return tw, th, td


def _call(impl, fn, *args):
    return getattr(impl, fn)(*args, BOUND, MIN_BIN, MIN_DERIVATIVE)


def _backward(impl, u, tw, th, td, gz, gl):
    return impl.rqs_backward(u, tw, th, td, BOUND, MIN_BIN, MIN_DERIVATIVE, gz, gl)


@pytest.fixture(params=["numpy", "compiled"])
def impl(request):
    if request.param == "numpy":
        return kernels.numpy_impl
    if kernels.compiled_impl is None:
        pytest.skip("compiled backend not built")
    return kernels.compiled_impl


def test_identity_parameters(impl):
    """Zero raw widths/heights plus the matched raw derivative give the
    identity map with zero log-determinant, inside and outside range."""
    rng = np.random.default_rng(0)
    u = rng.uniform(-6, 6, size=200)
    k = 8
    tw = np.zeros((1, k))
    th = np.zeros((1, k))
    td = np.full((1, k - 1), identity_derivative_raw())
    z, logdet = _call(impl, "rqs_forward", u, tw, th, td)
    np.testing.assert_allclose(z, u, atol=1e-9)
    np.testing.assert_allclose(logdet, 0.0, atol=1e-9)


def test_round_trip(impl):
    rng = np.random.default_rng(1)
    n, k = 500, 8
    u = rng.uniform(-5.5, 5.5, size=n)
    tw, th, td = _random_params(rng, n, k)
    z, logdet = _call(impl, "rqs_forward", u, tw, th, td)
    u2, logdet_inv = _call(impl, "rqs_inverse", z, tw, th, td)
    np.testing.assert_allclose(u2, u, atol=1e-9)
    np.testing.assert_allclose(logdet_inv, -logdet, atol=1e-9)


def test_monotone(impl):
    rng = np.random.default_rng(2)
    k = 16
    tw, th, td = _random_params(rng, 1, k, spread=2.5)
    u = np.linspace(-BOUND - 1, BOUND + 1, 4001)
    z, _ = _call(impl, "rqs_forward", u, tw, th, td)
    assert np.all(np.diff(z) > 0)


def test_outside_range_is_identity(impl):
    rng = np.random.default_rng(3)
    u = np.array([-9.0, -4.0001, 4.0001, 9.0])
    tw, th, td = _random_params(rng, u.size, 6)
    z, logdet = _call(impl, "rqs_forward", u, tw, th, td)
    np.testing.assert_array_equal(z, u)
    np.testing.assert_array_equal(logdet, np.zeros_like(u))


def test_logdet_matches_slope(impl):
    rng = np.random.default_rng(4)
    n, k = 300, 10
    u = rng.uniform(-3.9, 3.9, size=n)
    tw, th, td = _random_params(rng, n, k)
    _, logdet = _call(impl, "rqs_forward", u, tw, th, td)
    h = 1e-6
    zp, _ = _call(impl, "rqs_forward", u + h, tw, th, td)
    zm, _ = _call(impl, "rqs_forward", u - h, tw, th, td)
    np.testing.assert_allclose(logdet, np.log((zp - zm) / (2 * h)), atol=1e-6)


@pytest.mark.parametrize("shared", [False, True])
def test_backward_matches_finite_differences(impl, shared):
    """All four gradients of sum(w_z*z + w_l*logdet); `shared` exercises
    the single-parameter-row broadcast with gradient summation."""
    rng = np.random.default_rng(5)
    n, k = 40, 5
    u = rng.uniform(-4.5, 4.5, size=n)  # a few lanes out of range
    tw, th, td = _random_params(rng, n, k, shared=shared)
    wz = rng.normal(size=n)
    wl = rng.normal(size=n)

    def loss(u_, tw_, th_, td_):
        z, logdet = _call(impl, "rqs_forward", u_, tw_, th_, td_)
        return float(np.sum(wz * z + wl * logdet))

    gu, gtw, gth, gtd = _backward(impl, u, tw, th, td, wz, wl)
    h = 1e-6
    for arr, g in ((u, gu), (tw, gtw), (th, gth), (td, gtd)):
        num = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            hi = loss(u, tw, th, td)
            arr[idx] = orig - h
            lo = loss(u, tw, th, td)
            arr[idx] = orig
            num[idx] = (hi - lo) / (2 * h)
        np.testing.assert_allclose(g, num, rtol=2e-4, atol=2e-6)


def test_invalid_shapes_raise(impl):
    u = np.zeros(4)
    with pytest.raises(Exception):
        _call(impl, "rqs_forward", u, np.zeros((2, 5)), np.zeros((2, 5)), np.zeros((2, 4)))
    with pytest.raises(Exception):
        # derivative row must have k-1 entries
        _call(impl, "rqs_forward", u, np.zeros((4, 5)), np.zeros((4, 5)), np.zeros((4, 3)))


@pytest.mark.skipif(kernels.compiled_impl is None, reason="compiled backend not built")
class TestBackendParity:
    """The extension must agree with the reference to float precision."""

    def test_forward_inverse(self):
        rng = np.random.default_rng(6)
        n, k = 2000, 12
        u = rng.uniform(-5, 5, size=n)
        tw, th, td = _random_params(rng, n, k, spread=2.0)
        z_np, l_np = _call(numpy_impl, "rqs_forward", u, tw, th, td)
        z_c, l_c = _call(kernels.compiled_impl, "rqs_forward", u, tw, th, td)
        np.testing.assert_allclose(z_c, z_np, atol=1e-10, rtol=1e-10)
        np.testing.assert_allclose(l_c, l_np, atol=1e-10, rtol=1e-10)
        u_np, li_np = _call(numpy_impl, "rqs_inverse", z_np, tw, th, td)
        u_c, li_c = _call(kernels.compiled_impl, "rqs_inverse", z_np, tw, th, td)
        # the root solve conditions worse than the forward evaluation,
        # so summation-order noise shows up a couple digits earlier
        np.testing.assert_allclose(u_c, u_np, atol=1e-8, rtol=1e-8)
        np.testing.assert_allclose(li_c, li_np, atol=1e-8, rtol=1e-8)

    @pytest.mark.parametrize("shared", [False, True])
    def test_backward(self, shared):
        rng = np.random.default_rng(7)
        n, k = 500, 7
        u = rng.uniform(-5, 5, size=n)
        tw, th, td = _random_params(rng, n, k, shared=shared)
        gz = rng.normal(size=n)
        gl = rng.normal(size=n)
        outs_np = _backward(numpy_impl, u, tw, th, td, gz, gl)
        outs_c = _backward(kernels.compiled_impl, u, tw, th, td, gz, gl)
        for a, b in zip(outs_c, outs_np):
            np.testing.assert_allclose(a, b, atol=1e-10, rtol=1e-10)


def test_backend_selected():
    assert kernels.BACKEND in ("numpy", "compiled")
    assert kernels.rqs_forward is (
        kernels.compiled_impl.rqs_forward
        if kernels.BACKEND == "compiled"
        else numpy_impl.rqs_forward
    )
