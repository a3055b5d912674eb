"""Pure numpy implementation of the whole-image kernels.

Loops run over window offsets, never over pixels. Every function takes
single-channel float64 planes; padding is done by the caller.
"""
import numpy as np

NAME = "numpy"


def nlm_filter(padded, sigma, radius, patch_radius, spatial_sigma, need_grad=False):
    """Spatially varying NLM.

    ``padded`` carries a mirror margin of ``radius + patch_radius``;
    ``sigma`` is the (already floored) signal sigma per output pixel.
    Returns ``(out, d_out/d_sigma or None)``.
    """
    R, P = radius, patch_radius
    H = padded.shape[0] - 2 * (R + P)
    W = padded.shape[1] - 2 * (R + P)
    n_patch = float((2 * P + 1) ** 2)
    ctr = padded[R:R + H + 2 * P, R:R + W + 2 * P]
    inv = 0.5 / (sigma * sigma)
    s0 = np.zeros((H, W))
    s1 = np.zeros((H, W))
    if need_grad:
        sd = np.zeros((H, W))
        sdi = np.zeros((H, W))
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            g = np.exp(-(dx * dx + dy * dy) / (2.0 * spatial_sigma * spatial_sigma))
            sh = padded[R + dy:R + dy + H + 2 * P, R + dx:R + dx + W + 2 * P]
            diff2 = (ctr - sh) ** 2
            dist = np.zeros((H, W))
            for qy in range(2 * P + 1):
                for qx in range(2 * P + 1):
                    dist += diff2[qy:qy + H, qx:qx + W]
            dist /= n_patch
            u = g * np.exp(-dist * inv)
            val = sh[P:P + H, P:P + W]
            s0 += u
            s1 += u * val
            if need_grad:
                ud = u * dist
                sd += ud
                sdi += ud * val
    out = s1 / s0
    if not need_grad:
        return out, None
    grad = (sdi / s0 - (sd / s0) * out) / (sigma * sigma * sigma)
    return out, grad


def aniso_filter(padded, s1, s2, rho, radius, need_grad=False):
    """Spatially varying anisotropic Gaussian.

    Parameters are per-pixel arrays, already clamped into the valid domain.
    Returns ``(out, (d/ds1, d/ds2, d/drho) or None)``.
    """
    R = radius
    H = padded.shape[0] - 2 * R
    W = padded.shape[1] - 2 * R
    k = 1.0 / (1.0 - rho * rho)
    i1 = 1.0 / s1
    i2 = 1.0 / s2
    s0 = np.zeros((H, W))
    acc = np.zeros((H, W))
    if need_grad:
        sg = np.zeros((3, H, W))
        sgi = np.zeros((3, H, W))
    for dy in range(-R, R + 1):
        for dx in range(-R, R + 1):
            a = dx * i1
            b = dy * i2
            ab = a * b
            q = k * (a * a - 2.0 * rho * ab + b * b)
            u = np.exp(-0.5 * q)
            val = padded[R + dy:R + dy + H, R + dx:R + dx + W]
            s0 += u
            acc += u * val
            if need_grad:
                for j, gq in enumerate((
                    2.0 * k * i1 * (rho * ab - a * a),
                    2.0 * k * i2 * (rho * ab - b * b),
                    2.0 * k * (rho * q - ab),
                )):
                    ug = u * gq
                    sg[j] += ug
                    sgi[j] += ug * val
    out = acc / s0
    if not need_grad:
        return out, None
    grads = -0.5 * (sgi / s0 - (sg / s0) * out)
    return out, grads


def rbf_resample(padded, u, v, p11, p12, p22):
    """Anisotropic Gaussian RBF resampling over a 5x5 source neighborhood.

    ``padded`` has a mirror margin of 2. ``u`` (columns) and ``v`` (rows)
    are continuous source coordinates of the output samples; ``p11, p12,
    p22`` are per-output precision entries of shape (len(v), len(u)).
    """
    nx = np.floor(u + 0.5).astype(np.intp)
    ny = np.floor(v + 0.5).astype(np.intp)
    s0 = np.zeros(p11.shape)
    acc = np.zeros(p11.shape)
    for oy in range(-2, 3):
        sy = ny + oy
        dy = (sy - v)[:, None]
        rows = padded[sy + 2]
        for ox in range(-2, 3):
            sx = nx + ox
            dx = (sx - u)[None, :]
            q = p11 * dx * dx + 2.0 * p12 * dx * dy + p22 * dy * dy
            w = np.exp(-0.5 * q)
            s0 += w
            acc += w * rows[:, sx + 2]
    return acc / s0
