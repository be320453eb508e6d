# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled mirror of rqs_np; identical signatures and semantics.

Parity with the numpy backend is enforced by tests, so any change here
must land in rqs_np.py as well.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt

cnp.import_array()


cdef inline double _softplus(double t) nogil:
    if t > 0.0:
        return t + log1p(exp(-t))
    return log1p(exp(t))


cdef inline double _sigmoid(double t) nogil:
    if t >= 0.0:
        return 1.0 / (1.0 + exp(-t))
    cdef double e = exp(t)
    return e / (1.0 + e)


cdef void _row_knots(const double* tw, const double* th, const double* td,
                     Py_ssize_t k, double bound, double min_bin, double min_deriv,
                     double* xk, double* yk, double* dk) nogil:
    cdef Py_ssize_t j
    cdef double mw = tw[0], mh = th[0], sw = 0.0, sh = 0.0, cw = 0.0, ch = 0.0
    cdef double scale = 1.0 - min_bin * k
    cdef double wj, hj
    for j in range(1, k):
        if tw[j] > mw:
            mw = tw[j]
        if th[j] > mh:
            mh = th[j]
    for j in range(k):
        sw += exp(tw[j] - mw)
        sh += exp(th[j] - mh)
    xk[0] = -bound
    yk[0] = -bound
    for j in range(k):
        wj = exp(tw[j] - mw) / sw
        hj = exp(th[j] - mh) / sh
        cw += min_bin + scale * wj
        ch += min_bin + scale * hj
        xk[j + 1] = -bound + 2.0 * bound * cw
        yk[j + 1] = -bound + 2.0 * bound * ch
    xk[k] = bound
    yk[k] = bound
    dk[0] = 1.0
    dk[k] = 1.0
    for j in range(k - 1):
        dk[j + 1] = min_deriv + _softplus(td[j])


cdef inline Py_ssize_t _find_bin(const double* knots, Py_ssize_t k, double v) nogil:
    # count of interior knots <= v, clipped to the last bin
    cdef Py_ssize_t i, j = 0
    for i in range(1, k):
        if knots[i] <= v:
            j += 1
    if j > k - 1:
        j = k - 1
    return j


def _coerce(u, tw, th, td):
    u = np.ascontiguousarray(u, dtype=np.float64)
    tw = np.ascontiguousarray(tw, dtype=np.float64)
    th = np.ascontiguousarray(th, dtype=np.float64)
    td = np.ascontiguousarray(td, dtype=np.float64)
    n = u.shape[0]
    p, k = tw.shape
    assert th.shape == (p, k) and td.shape == (p, k - 1)
    assert p in (1, n)
    return u, tw, th, td


def rqs_forward(u, tw, th, td, double bound, double min_bin, double min_deriv):
    """Returns (z, logdet) with logdet = log|dz/du|, zero outside."""
    u, tw, th, td = _coerce(u, tw, th, td)
    cdef double[::1] uv = u
    cdef double[:, ::1] twv = tw, thv = th, tdv = td
    cdef Py_ssize_t n = uv.shape[0], p = twv.shape[0], k = twv.shape[1]
    z_arr = np.empty(n)
    ld_arr = np.empty(n)
    cdef double[::1] zv = z_arr, ldv = ld_arr
    kx_arr = np.empty(k + 1)
    ky_arr = np.empty(k + 1)
    kd_arr = np.empty(k + 1)
    cdef double[::1] xk = kx_arr, yk = ky_arr, dk = kd_arr
    cdef Py_ssize_t i, b
    cdef double ui, w, h, s, xi, p2, den, num, dnum, d0, d1
    with nogil:
        if p == 1:
            _row_knots(&twv[0, 0], &thv[0, 0], &tdv[0, 0], k,
                       bound, min_bin, min_deriv, &xk[0], &yk[0], &dk[0])
        for i in range(n):
            ui = uv[i]
            if ui < -bound or ui > bound:
                zv[i] = ui
                ldv[i] = 0.0
                continue
            if p != 1:
                _row_knots(&twv[i, 0], &thv[i, 0], &tdv[i, 0], k,
                           bound, min_bin, min_deriv, &xk[0], &yk[0], &dk[0])
            b = _find_bin(&xk[0], k, ui)
            w = xk[b + 1] - xk[b]
            h = yk[b + 1] - yk[b]
            s = h / w
            d0 = dk[b]
            d1 = dk[b + 1]
            xi = (ui - xk[b]) / w
            p2 = xi * (1.0 - xi)
            den = s + (d0 + d1 - 2.0 * s) * p2
            num = h * (s * xi * xi + d0 * p2)
            dnum = s * s * (d1 * xi * xi + 2.0 * s * p2
                            + d0 * (1.0 - xi) * (1.0 - xi))
            zv[i] = yk[b] + num / den
            ldv[i] = log(dnum) - 2.0 * log(den)
    return z_arr, ld_arr


def rqs_backward(u, tw, th, td, double bound, double min_bin, double min_deriv,
                 gz, glogdet):
    """Gradients of (gz . z + glogdet . logdet) w.r.t. u, tw, th, td."""
    u, tw, th, td = _coerce(u, tw, th, td)
    gz = np.ascontiguousarray(gz, dtype=np.float64)
    gl = np.ascontiguousarray(glogdet, dtype=np.float64)
    cdef double[::1] uv = u, gzv = gz, glv = gl
    cdef double[:, ::1] twv = tw, thv = th, tdv = td
    cdef Py_ssize_t n = uv.shape[0], p = twv.shape[0], k = twv.shape[1]
    gu_arr = np.empty(n)
    gtw_arr = np.zeros((p, k))
    gth_arr = np.zeros((p, k))
    gtd_arr = np.zeros((p, k - 1))
    cdef double[::1] guv = gu_arr
    cdef double[:, ::1] gtwv = gtw_arr, gthv = gth_arr, gtdv = gtd_arr
    kx_arr = np.empty(k + 1)
    ky_arr = np.empty(k + 1)
    kd_arr = np.empty(k + 1)
    cdef double[::1] xk = kx_arr, yk = ky_arr, dk = kd_arr
    cdef Py_ssize_t i, b, r, j
    cdef double ui, w, h, s, xi, p2, den, num, dnum, d0, d1
    cdef double inv_den, rr, g_num, g_den, g_dnum, one_m
    cdef double g_h, g_s, g_xi, g_d0, g_d1, g_w, g_x0, g_x1, g_y0, g_y1
    cdef double g_c0, g_c1, scale, dot, mx, sm, tj
    scale = 1.0 - min_bin * k
    with nogil:
        if p == 1:
            _row_knots(&twv[0, 0], &thv[0, 0], &tdv[0, 0], k,
                       bound, min_bin, min_deriv, &xk[0], &yk[0], &dk[0])
        for i in range(n):
            ui = uv[i]
            if ui < -bound or ui > bound:
                guv[i] = gzv[i]
                continue
            r = 0 if p == 1 else i
            if p != 1:
                _row_knots(&twv[i, 0], &thv[i, 0], &tdv[i, 0], k,
                           bound, min_bin, min_deriv, &xk[0], &yk[0], &dk[0])
            b = _find_bin(&xk[0], k, ui)
            w = xk[b + 1] - xk[b]
            h = yk[b + 1] - yk[b]
            s = h / w
            d0 = dk[b]
            d1 = dk[b + 1]
            xi = (ui - xk[b]) / w
            p2 = xi * (1.0 - xi)
            one_m = 1.0 - xi
            den = s + (d0 + d1 - 2.0 * s) * p2
            num = h * (s * xi * xi + d0 * p2)
            dnum = s * s * (d1 * xi * xi + 2.0 * s * p2 + d0 * one_m * one_m)

            inv_den = 1.0 / den
            rr = num * inv_den
            g_num = gzv[i] * inv_den
            g_den = -gzv[i] * rr * inv_den - 2.0 * glv[i] * inv_den
            g_dnum = glv[i] / dnum

            g_h = g_num * (s * xi * xi + d0 * p2)
            g_s = (g_num * h * xi * xi
                   + g_den * (1.0 - 2.0 * p2)
                   + g_dnum * (2.0 * dnum / s + 2.0 * s * s * p2))
            g_xi = (g_num * h * (2.0 * s * xi + d0 * (1.0 - 2.0 * xi))
                    + g_den * (d0 + d1 - 2.0 * s) * (1.0 - 2.0 * xi)
                    + g_dnum * s * s * (2.0 * d1 * xi + 2.0 * s * (1.0 - 2.0 * xi)
                                        - 2.0 * d0 * one_m))
            g_d0 = g_num * h * p2 + g_den * p2 + g_dnum * s * s * one_m * one_m
            g_d1 = g_den * p2 + g_dnum * s * s * xi * xi

            g_h += g_s / w
            g_w = -g_s * s / w
            guv[i] = g_xi / w
            g_x0 = g_xi * (xi - 1.0) / w - g_w
            g_x1 = -g_xi * xi / w + g_w
            g_y0 = gzv[i] - g_h
            g_y1 = g_h

            g_c0 = 2.0 * bound * g_x0 if b >= 1 else 0.0
            g_c1 = 2.0 * bound * g_x1 if b <= k - 2 else 0.0
            for j in range(b):
                gtwv[r, j] += scale * g_c0
            for j in range(b + 1):
                gtwv[r, j] += scale * g_c1
            g_c0 = 2.0 * bound * g_y0 if b >= 1 else 0.0
            g_c1 = 2.0 * bound * g_y1 if b <= k - 2 else 0.0
            for j in range(b):
                gthv[r, j] += scale * g_c0
            for j in range(b + 1):
                gthv[r, j] += scale * g_c1
            if b >= 1:
                gtdv[r, b - 1] += g_d0
            if b <= k - 2:
                gtdv[r, b] += g_d1

        # pass 2: chain accumulated knot-space grads through softmax/sigmoid
        for r in range(p):
            mx = twv[r, 0]
            for j in range(1, k):
                if twv[r, j] > mx:
                    mx = twv[r, j]
            sm = 0.0
            for j in range(k):
                sm += exp(twv[r, j] - mx)
            dot = 0.0
            for j in range(k):
                dot += (exp(twv[r, j] - mx) / sm) * gtwv[r, j]
            for j in range(k):
                tj = exp(twv[r, j] - mx) / sm
                gtwv[r, j] = tj * (gtwv[r, j] - dot)

            mx = thv[r, 0]
            for j in range(1, k):
                if thv[r, j] > mx:
                    mx = thv[r, j]
            sm = 0.0
            for j in range(k):
                sm += exp(thv[r, j] - mx)
            dot = 0.0
            for j in range(k):
                dot += (exp(thv[r, j] - mx) / sm) * gthv[r, j]
            for j in range(k):
                tj = exp(thv[r, j] - mx) / sm
                gthv[r, j] = tj * (gthv[r, j] - dot)

            for j in range(k - 1):
                gtdv[r, j] *= _sigmoid(tdv[r, j])
    return gu_arr, gtw_arr, gth_arr, gtd_arr


def rqs_inverse(z, tw, th, td, double bound, double min_bin, double min_deriv):
    """Returns (u, logdet) with logdet = log|du/dz|."""
    z, tw, th, td = _coerce(z, tw, th, td)
    cdef double[::1] zv = z
    cdef double[:, ::1] twv = tw, thv = th, tdv = td
    cdef Py_ssize_t n = zv.shape[0], p = twv.shape[0], k = twv.shape[1]
    u_arr = np.empty(n)
    ld_arr = np.empty(n)
    cdef double[::1] uv = u_arr, ldv = ld_arr
    kx_arr = np.empty(k + 1)
    ky_arr = np.empty(k + 1)
    kd_arr = np.empty(k + 1)
    cdef double[::1] xk = kx_arr, yk = ky_arr, dk = kd_arr
    cdef Py_ssize_t i, b
    cdef double zi, w, h, s, xi, p2, den, dnum, d0, d1
    cdef double dz, t2, qa, qb, qc, disc
    with nogil:
        if p == 1:
            _row_knots(&twv[0, 0], &thv[0, 0], &tdv[0, 0], k,
                       bound, min_bin, min_deriv, &xk[0], &yk[0], &dk[0])
        for i in range(n):
            zi = zv[i]
            if zi < -bound or zi > bound:
                uv[i] = zi
                ldv[i] = 0.0
                continue
            if p != 1:
                _row_knots(&twv[i, 0], &thv[i, 0], &tdv[i, 0], k,
                           bound, min_bin, min_deriv, &xk[0], &yk[0], &dk[0])
            b = _find_bin(&yk[0], k, zi)
            w = xk[b + 1] - xk[b]
            h = yk[b + 1] - yk[b]
            s = h / w
            d0 = dk[b]
            d1 = dk[b + 1]
            dz = zi - yk[b]
            t2 = d0 + d1 - 2.0 * s
            qa = h * (s - d0) + dz * t2
            qb = h * d0 - dz * t2
            qc = -s * dz
            disc = qb * qb - 4.0 * qa * qc
            if disc < 0.0:
                disc = 0.0
            xi = 2.0 * qc / (-qb - sqrt(disc))
            if xi < 0.0:
                xi = 0.0
            elif xi > 1.0:
                xi = 1.0
            uv[i] = xk[b] + xi * w
            p2 = xi * (1.0 - xi)
            den = s + t2 * p2
            dnum = s * s * (d1 * xi * xi + 2.0 * s * p2
                            + d0 * (1.0 - xi) * (1.0 - xi))
            ldv[i] = -(log(dnum) - 2.0 * log(den))
    return u_arr, ld_arr
