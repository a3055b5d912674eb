# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops mirroring ``_fallback``.

Same contracts and argument order as the numpy versions. Work is
organized per window offset: fused C loops build the exponent plane for
that offset, numpy's vectorized ``exp`` evaluates it in one call, and
another fused loop accumulates the weighted sums. Per output pixel the
summation order over offsets is fixed, so results are deterministic.
"""
import numpy as np
from libc.math cimport exp, floor

NAME = "cython"


def nlm_filter(double[:, ::1] padded, double[:, ::1] sigma, int radius,
               int patch_radius, double spatial_sigma, bint need_grad=False):
    cdef int R = radius, P = patch_radius
    cdef Py_ssize_t H = padded.shape[0] - 2 * (R + P)
    cdef Py_ssize_t W = padded.shape[1] - 2 * (R + P)
    cdef Py_ssize_t HP = H + 2 * P
    cdef double n_patch = (2 * P + 1) * (2 * P + 1)

    cdef double[:, ::1] inv = np.empty((H, W))
    cdef double[:, ::1] hs = np.empty((HP, W))
    cdef double[:, ::1] dist = np.empty((H, W))
    arg_arr = np.empty((H, W))
    cdef double[:, ::1] arg = arg_arr
    s0_arr = np.zeros((H, W))
    s1_arr = np.zeros((H, W))
    cdef double[:, ::1] s0 = s0_arr
    cdef double[:, ::1] s1 = s1_arr
    cdef double[:, ::1] sd
    cdef double[:, ::1] sdi
    if need_grad:
        sd = np.zeros((H, W))
        sdi = np.zeros((H, W))

    cdef Py_ssize_t i, y, x
    cdef int dy, dx, q
    cdef double g, acc, diff, u, val, s
    with nogil:
        for y in range(H):
            for x in range(W):
                s = sigma[y, x]
                inv[y, x] = 0.5 / (s * s)
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            g = exp(-(dx * dx + dy * dy) / (2.0 * spatial_sigma * spatial_sigma))
            with nogil:
                # patch distance as a separable box sum of squared differences
                for i in range(HP):
                    for x in range(W):
                        acc = 0.0
                        for q in range(2 * P + 1):
                            diff = padded[R + i, R + x + q] - padded[R + dy + i, R + dx + x + q]
                            acc = acc + diff * diff
                        hs[i, x] = acc
                for y in range(H):
                    for x in range(W):
                        acc = 0.0
                        for q in range(2 * P + 1):
                            acc = acc + hs[y + q, x]
                        acc = acc / n_patch
                        dist[y, x] = acc
                        arg[y, x] = -acc * inv[y, x]
            np.exp(arg_arr, out=arg_arr)
            with nogil:
                for y in range(H):
                    for x in range(W):
                        u = g * arg[y, x]
                        val = padded[R + P + dy + y, R + P + dx + x]
                        s0[y, x] = s0[y, x] + u
                        s1[y, x] = s1[y, x] + u * val
                        if need_grad:
                            u = u * dist[y, x]
                            sd[y, x] = sd[y, x] + u
                            sdi[y, x] = sdi[y, x] + u * val
    out_arr = s1_arr / s0_arr
    if not need_grad:
        return out_arr, None
    cdef double[:, ::1] out = out_arr
    grad_arr = np.empty((H, W))
    cdef double[:, ::1] grad = grad_arr
    with nogil:
        for y in range(H):
            for x in range(W):
                s = sigma[y, x]
                grad[y, x] = (sdi[y, x] / s0[y, x] - (sd[y, x] / s0[y, x]) * out[y, x]) / (s * s * s)
    return out_arr, grad_arr


def aniso_filter(double[:, ::1] padded, double[:, ::1] s1, double[:, ::1] s2,
                 double[:, ::1] rho, int radius, bint need_grad=False):
    cdef int R = radius
    cdef Py_ssize_t H = padded.shape[0] - 2 * R
    cdef Py_ssize_t W = padded.shape[1] - 2 * R
    cdef double[:, ::1] kk = np.empty((H, W))
    cdef double[:, ::1] i1 = np.empty((H, W))
    cdef double[:, ::1] i2 = np.empty((H, W))
    arg_arr = np.empty((H, W))
    cdef double[:, ::1] arg = arg_arr
    cdef double[:, ::1] qq = np.empty((H, W))
    s0_arr = np.zeros((H, W))
    acc_arr = np.zeros((H, W))
    cdef double[:, ::1] s0 = s0_arr
    cdef double[:, ::1] acc = acc_arr
    cdef double[:, :, ::1] sg
    cdef double[:, :, ::1] sgi
    if need_grad:
        sg = np.zeros((3, H, W))
        sgi = np.zeros((3, H, W))

    cdef Py_ssize_t y, x
    cdef int dy, dx
    cdef double r, k, a, b, ab, q, u, val, g0, g1, g2
    with nogil:
        for y in range(H):
            for x in range(W):
                r = rho[y, x]
                kk[y, x] = 1.0 / (1.0 - r * r)
                i1[y, x] = 1.0 / s1[y, x]
                i2[y, x] = 1.0 / s2[y, x]
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            with nogil:
                for y in range(H):
                    for x in range(W):
                        a = dx * i1[y, x]
                        b = dy * i2[y, x]
                        q = kk[y, x] * (a * a - 2.0 * rho[y, x] * a * b + b * b)
                        qq[y, x] = q
                        arg[y, x] = -0.5 * q
            np.exp(arg_arr, out=arg_arr)
            with nogil:
                for y in range(H):
                    for x in range(W):
                        u = arg[y, x]
                        val = padded[y + R + dy, x + R + dx]
                        s0[y, x] = s0[y, x] + u
                        acc[y, x] = acc[y, x] + u * val
                        if need_grad:
                            r = rho[y, x]
                            k = kk[y, x]
                            a = dx * i1[y, x]
                            b = dy * i2[y, x]
                            ab = a * b
                            q = qq[y, x]
                            g0 = u * 2.0 * k * i1[y, x] * (r * ab - a * a)
                            g1 = u * 2.0 * k * i2[y, x] * (r * ab - b * b)
                            g2 = u * 2.0 * k * (r * q - ab)
                            sg[0, y, x] = sg[0, y, x] + g0
                            sg[1, y, x] = sg[1, y, x] + g1
                            sg[2, y, x] = sg[2, y, x] + g2
                            sgi[0, y, x] = sgi[0, y, x] + g0 * val
                            sgi[1, y, x] = sgi[1, y, x] + g1 * val
                            sgi[2, y, x] = sgi[2, y, x] + g2 * val
    out_arr = acc_arr / s0_arr
    if not need_grad:
        return out_arr, None
    cdef double[:, ::1] out = out_arr
    grad_arr = np.empty((3, H, W))
    cdef double[:, :, ::1] grad = grad_arr
    cdef int j
    with nogil:
        for j in range(3):
            for y in range(H):
                for x in range(W):
                    grad[j, y, x] = -0.5 * (sgi[j, y, x] / s0[y, x] - (sg[j, y, x] / s0[y, x]) * out[y, x])
    return out_arr, grad_arr


def rbf_resample(double[:, ::1] padded, double[::1] u, double[::1] v,
                 double[:, ::1] p11, double[:, ::1] p12, double[:, ::1] p22):
    cdef Py_ssize_t Ho = v.shape[0], Wo = u.shape[0]
    cdef Py_ssize_t[::1] nx = np.empty(Wo, dtype=np.intp)
    cdef Py_ssize_t[::1] ny = np.empty(Ho, dtype=np.intp)
    arg_arr = np.empty((Ho, Wo))
    cdef double[:, ::1] arg = arg_arr
    s0_arr = np.zeros((Ho, Wo))
    acc_arr = np.zeros((Ho, Wo))
    cdef double[:, ::1] s0 = s0_arr
    cdef double[:, ::1] acc = acc_arr
    cdef Py_ssize_t y, x
    cdef int ox, oy
    cdef double ddx, ddy, w
    with nogil:
        for x in range(Wo):
            nx[x] = <Py_ssize_t>floor(u[x] + 0.5)
        for y in range(Ho):
            ny[y] = <Py_ssize_t>floor(v[y] + 0.5)
    for oy in range(-2, 3):
        for ox in range(-2, 3):
            with nogil:
                for y in range(Ho):
                    ddy = ny[y] + oy - v[y]
                    for x in range(Wo):
                        ddx = nx[x] + ox - u[x]
                        arg[y, x] = -0.5 * (p11[y, x] * ddx * ddx + 2.0 * p12[y, x] * ddx * ddy
                                            + p22[y, x] * ddy * ddy)
            np.exp(arg_arr, out=arg_arr)
            with nogil:
                for y in range(Ho):
                    for x in range(Wo):
                        w = arg[y, x]
                        s0[y, x] = s0[y, x] + w
                        acc[y, x] = acc[y, x] + w * padded[ny[y] + oy + 2, nx[x] + ox + 2]
    return acc_arr / s0_arr
