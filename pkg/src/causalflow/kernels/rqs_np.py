"""Monotone rational-quadratic spline kernels, numpy reference backend.

Each kernel maps a scalar batch u (n,) through a spline whose raw
parameters come straight from a conditioner net:

  tw (p, K)   raw bin widths   -> softmax -> min_bin floor -> x knots
  th (p, K)   raw bin heights  -> softmax -> min_bin floor -> y knots
  td (p, K-1) raw interior derivatives -> min_deriv + softplus(td)

p is 1 (shared parameters, broadcast over the batch) or n (one row per
sample). Knots span [-bound, bound]; outside, the map is the identity
with boundary derivatives pinned to 1 so the junction is C^1.

`rqs_backward` recomputes the forward internally and contracts the
local partials with the incoming gradients, chaining back through the
softmax/cumsum/softplus parameterization. The compiled backend mirrors
these signatures exactly.
"""

import numpy as np


def _softmax(t):
    e = np.exp(t - t.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _knots(tw, th, td, bound, min_bin, min_deriv):
    n, k = tw.shape
    w_til = _softmax(tw)
    h_til = _softmax(th)
    wk = min_bin + (1.0 - min_bin * k) * w_til
    hk = min_bin + (1.0 - min_bin * k) * h_til
    xk = np.empty((n, k + 1))
    yk = np.empty((n, k + 1))
    xk[:, 0] = -bound
    yk[:, 0] = -bound
    xk[:, 1:] = -bound + 2.0 * bound * np.cumsum(wk, axis=1)
    yk[:, 1:] = -bound + 2.0 * bound * np.cumsum(hk, axis=1)
    xk[:, -1] = bound
    yk[:, -1] = bound
    d = np.empty((n, k + 1))
    d[:, 0] = 1.0
    d[:, -1] = 1.0
    d[:, 1:-1] = min_deriv + np.logaddexp(0.0, td)
    return xk, yk, d, w_til, h_til


def _check(u, tw, th, td):
    u = np.ascontiguousarray(u, dtype=np.float64)
    tw = np.ascontiguousarray(tw, dtype=np.float64)
    th = np.ascontiguousarray(th, dtype=np.float64)
    td = np.ascontiguousarray(td, dtype=np.float64)
    n = u.shape[0]
    p, k = tw.shape
    assert th.shape == (p, k) and td.shape == (p, k - 1)
    assert p in (1, n)
    return u, tw, th, td


def _bins(vals, knots):
    # row-wise searchsorted; knots may have 1 row (broadcast)
    k = knots.shape[1] - 1
    idx = np.sum(knots[:, 1:k] <= vals[:, None], axis=1)
    return np.clip(idx, 0, k - 1)


def _gather(arr, idx):
    if arr.shape[0] == 1:
        return arr[0, idx]
    return np.take_along_axis(arr, idx[:, None], axis=1)[:, 0]


def rqs_forward(u, tw, th, td, bound, min_bin, min_deriv):
    """Returns (z, logdet) with logdet = log|dz/du|, zero outside."""
    u, tw, th, td = _check(u, tw, th, td)
    xk, yk, d, _, _ = _knots(tw, th, td, bound, min_bin, min_deriv)
    inside = (u >= -bound) & (u <= bound)
    uc = np.clip(u, -bound, bound)
    b = _bins(uc, xk)
    x0 = _gather(xk, b)
    x1 = _gather(xk, b + 1)
    y0 = _gather(yk, b)
    y1 = _gather(yk, b + 1)
    d0 = _gather(d, b)
    d1 = _gather(d, b + 1)
    w = x1 - x0
    h = y1 - y0
    s = h / w
    xi = (uc - x0) / w
    p2 = xi * (1.0 - xi)
    den = s + (d0 + d1 - 2.0 * s) * p2
    num = h * (s * xi * xi + d0 * p2)
    z_in = y0 + num / den
    dnum = s * s * (d1 * xi * xi + 2.0 * s * p2 + d0 * (1.0 - xi) * (1.0 - xi))
    ld_in = np.log(dnum) - 2.0 * np.log(den)
    z = np.where(inside, z_in, u)
    logdet = np.where(inside, ld_in, 0.0)
    return z, logdet


def rqs_backward(u, tw, th, td, bound, min_bin, min_deriv, gz, glogdet):
    """Gradients of (gz . z + glogdet . logdet) w.r.t. u, tw, th, td.

    If the parameter arrays have one row but n samples, their gradients
    are summed over the batch.
    """
    u, tw, th, td = _check(u, tw, th, td)
    gz = np.ascontiguousarray(gz, dtype=np.float64)
    gl = np.ascontiguousarray(glogdet, dtype=np.float64)
    n = u.shape[0]
    p, k = tw.shape
    xk, yk, d, w_til, h_til = _knots(tw, th, td, bound, min_bin, min_deriv)
    inside = (u >= -bound) & (u <= bound)
    uc = np.clip(u, -bound, bound)
    b = _bins(uc, xk)
    x0 = _gather(xk, b)
    x1 = _gather(xk, b + 1)
    y0 = _gather(yk, b)
    y1 = _gather(yk, b + 1)
    d0 = _gather(d, b)
    d1 = _gather(d, b + 1)
    w = x1 - x0
    h = y1 - y0
    s = h / w
    xi = (uc - x0) / w
    p2 = xi * (1.0 - xi)
    den = s + (d0 + d1 - 2.0 * s) * p2
    num = h * (s * xi * xi + d0 * p2)
    dnum = s * s * (d1 * xi * xi + 2.0 * s * p2 + d0 * (1.0 - xi) * (1.0 - xi))

    gz_in = np.where(inside, gz, 0.0)
    gl_in = np.where(inside, gl, 0.0)
    inv_den = 1.0 / den
    r = num * inv_den
    g_num = gz_in * inv_den
    g_den = -gz_in * r * inv_den - 2.0 * gl_in * inv_den
    g_dnum = gl_in / dnum

    one_m = 1.0 - xi
    g_h = g_num * (s * xi * xi + d0 * p2)
    g_s = (
        g_num * h * xi * xi
        + g_den * (1.0 - 2.0 * p2)
        + g_dnum * (2.0 * dnum / s + 2.0 * s * s * p2)
    )
    g_xi = (
        g_num * h * (2.0 * s * xi + d0 * (1.0 - 2.0 * xi))
        + g_den * (d0 + d1 - 2.0 * s) * (1.0 - 2.0 * xi)
        + g_dnum * s * s * (2.0 * d1 * xi + 2.0 * s * (1.0 - 2.0 * xi) - 2.0 * d0 * one_m)
    )
    g_d0 = g_num * h * p2 + g_den * p2 + g_dnum * s * s * one_m * one_m
    g_d1 = g_den * p2 + g_dnum * s * s * xi * xi

    # s = h / w, xi = (u - x0) / w
    g_h = g_h + g_s / w
    g_w = -g_s * s / w
    gu = np.where(inside, g_xi / w, gz)
    g_x0 = g_xi * (xi - 1.0) / w - g_w
    g_x1 = -g_xi * xi / w + g_w
    g_y0 = gz_in - g_h
    g_y1 = g_h

    # knots -> cumsum: x_m = -bound + 2*bound*c_m for interior m in 1..k-1;
    # c_m sums bins 0..m-1, so grad at c_m reaches every bin j <= m-1.
    two_b = 2.0 * bound
    cols = np.arange(k)
    lo_ok = (b >= 1).astype(np.float64)  # x0 = knot b
    hi_ok = (b + 1 <= k - 1).astype(np.float64)  # x1 = knot b+1
    pre0 = (cols[None, :] <= (b - 1)[:, None]).astype(np.float64)
    pre1 = (cols[None, :] <= b[:, None]).astype(np.float64)

    def raw_grad(g_lo, g_hi, tilde):
        g_c0 = two_b * g_lo * lo_ok
        g_c1 = two_b * g_hi * hi_ok
        g_bins = g_c0[:, None] * pre0 + g_c1[:, None] * pre1
        g_til = (1.0 - min_bin * k) * g_bins
        if p == 1 and n > 1:
            g_til = g_til.sum(axis=0, keepdims=True)
        dot = (tilde * g_til).sum(axis=1, keepdims=True)
        return tilde * (g_til - dot)

    gtw = raw_grad(g_x0, g_x1, w_til)
    gth = raw_grad(g_y0, g_y1, h_til)

    # interior derivative d_m (m in 1..k-1) sits at raw slot m-1
    gtd = np.zeros((p, k - 1))
    rows = np.zeros(n, dtype=int) if p == 1 else np.arange(n)
    lo_int = b >= 1
    hi_int = b <= k - 2
    np.add.at(gtd, (rows[lo_int], b[lo_int] - 1), g_d0[lo_int])
    np.add.at(gtd, (rows[hi_int], b[hi_int]), g_d1[hi_int])
    gtd *= 1.0 / (1.0 + np.exp(-td))
    return gu, gtw, gth, gtd


def rqs_inverse(z, tw, th, td, bound, min_bin, min_deriv):
    """Returns (u, logdet) with logdet = log|du/dz| = -forward logdet at u.

    Uses the stable root 2c / (-b - sqrt(b^2 - 4ac)) of the bin-local
    quadratic; monotonicity keeps the discriminant non-negative.
    """
    z, tw, th, td = _check(z, tw, th, td)
    xk, yk, d, _, _ = _knots(tw, th, td, bound, min_bin, min_deriv)
    inside = (z >= -bound) & (z <= bound)
    zc = np.clip(z, -bound, bound)
    b = _bins(zc, yk)
    x0 = _gather(xk, b)
    x1 = _gather(xk, b + 1)
    y0 = _gather(yk, b)
    y1 = _gather(yk, b + 1)
    d0 = _gather(d, b)
    d1 = _gather(d, b + 1)
    w = x1 - x0
    h = y1 - y0
    s = h / w
    dz = zc - y0
    t2 = d0 + d1 - 2.0 * s
    qa = h * (s - d0) + dz * t2
    qb = h * d0 - dz * t2
    qc = -s * dz
    disc = qb * qb - 4.0 * qa * qc
    disc = np.maximum(disc, 0.0)
    xi = 2.0 * qc / (-qb - np.sqrt(disc))
    xi = np.clip(xi, 0.0, 1.0)
    u_in = x0 + xi * w
    p2 = xi * (1.0 - xi)
    den = s + t2 * p2
    dnum = s * s * (d1 * xi * xi + 2.0 * s * p2 + d0 * (1.0 - xi) * (1.0 - xi))
    ld_in = -(np.log(dnum) - 2.0 * np.log(den))
    u = np.where(inside, u_in, z)
    logdet = np.where(inside, ld_in, 0.0)
    return u, logdet
