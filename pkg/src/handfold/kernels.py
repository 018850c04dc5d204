"""Compiled single-pass kernels behind the autodiff ops and the ball query.

All loops run in a fixed order, so results are bit-reproducible.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def bn_stats(z):
    """Per-channel mean and biased variance of a [rows, C] array (float64 accumulators)."""
    n, c = z.shape
    mean = np.zeros(c)
    for i in range(n):
        for j in range(c):
            mean[j] += z[i, j]
    mean /= n
    var = np.zeros(c)
    for i in range(n):
        for j in range(c):
            d = z[i, j] - mean[j]
            var[j] += d * d
    var /= n
    return mean, var


@njit(cache=True)
def bn_apply(z, mean, inv, gamma, beta, relu):
    """Normalize ``z`` in place (becomes x-hat) and return the affine (+ReLU) output."""
    n, c = z.shape
    y = np.empty_like(z)
    m = mean.astype(z.dtype)
    s = inv.astype(z.dtype)
    for i in range(n):
        for j in range(c):
            xh = (z[i, j] - m[j]) * s[j]
            z[i, j] = xh
            v = xh * gamma[j] + beta[j]
            if relu and v < 0:
                v = 0
            y[i, j] = v
    return y


@njit(cache=True)
def bn_backward(g, y, xhat, gamma, inv, relu, training):
    """Gradient w.r.t. the pre-normalization input, d gamma, d beta and the row sum of the former."""
    n, c = g.shape
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for i in range(n):
        for j in range(c):
            if relu and y[i, j] <= 0:
                continue
            dbeta[j] += g[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
    dz = np.empty_like(g)
    dsum = np.zeros(c)
    k = (gamma.astype(np.float64) * inv).astype(g.dtype)
    mb = (dbeta / n).astype(g.dtype)
    mg = (dgamma / n).astype(g.dtype)
    for i in range(n):
        for j in range(c):
            d = g[i, j]
            if relu and y[i, j] <= 0:
                d = 0
            if training:
                v = k[j] * (d - mb[j] - xhat[i, j] * mg[j])
            else:
                v = k[j] * d
            dz[i, j] = v
            dsum[j] += v
    return dz, dgamma, dbeta, dsum


@njit(cache=True)
def max_argmax(x):
    """Max over the middle axis of [A, S, C]; ties go to the lowest index."""
    a, s, c = x.shape
    vals = np.empty((a, c), dtype=x.dtype)
    arg = np.zeros((a, c), dtype=np.int32)
    for i in range(a):
        for j in range(c):
            vals[i, j] = x[i, 0, j]
        for k in range(1, s):
            for j in range(c):
                v = x[i, k, j]
                if v > vals[i, j]:
                    vals[i, j] = v
                    arg[i, j] = k
    return vals, arg


@njit(cache=True)
def max_scatter(g, arg, s):
    a, c = g.shape
    full = np.zeros((a, s, c), dtype=g.dtype)
    for i in range(a):
        for j in range(c):
            full[i, arg[i, j], j] = g[i, j]
    return full


@njit(cache=True)
def scatter_add_rows(idx, g, n):
    """``out[idx[k]] += g[k]`` for flat int index ``idx`` and [K, C] ``g``."""
    c = g.shape[1]
    out = np.zeros((n, c), dtype=g.dtype)
    for k in range(idx.shape[0]):
        r = idx[k]
        for j in range(c):
            out[r, j] += g[k, j]
    return out


@njit(cache=True)
def ball_query_kernel(centroids, points, r2, nsample):
    kc = centroids.shape[0]
    n = points.shape[0]
    out = np.empty((kc, nsample), dtype=np.int64)
    for i in range(kc):
        cnt = 0
        best = 0
        bestd = np.inf
        for p in range(n):
            d = 0.0
            for t in range(3):
                e = points[p, t] - centroids[i, t]
                d += e * e
            if d < bestd:
                bestd = d
                best = p
            if d <= r2:
                out[i, cnt] = p
                cnt += 1
                if cnt == nsample:
                    break
        if cnt == 0:
            out[i, 0] = best
            cnt = 1
        for k in range(cnt, nsample):
            out[i, k] = out[i, 0]
    return out


@njit(cache=True)
def bn_relu_max(z, mean, inv, gamma, beta, a, s):
    """Normalize ``z`` ([a*s, C]) in place and max-pool relu(affine) over groups of ``s`` rows."""
    c = z.shape[1]
    m = mean.astype(z.dtype)
    k = inv.astype(z.dtype)
    vals = np.zeros((a, c), dtype=z.dtype)
    arg = np.zeros((a, c), dtype=np.int32)
    for i in range(a):
        base = i * s
        for r in range(s):
            for j in range(c):
                xh = (z[base + r, j] - m[j]) * k[j]
                z[base + r, j] = xh
                v = xh * gamma[j] + beta[j]
                if r == 0:
                    vals[i, j] = v
                elif v > vals[i, j]:
                    vals[i, j] = v
                    arg[i, j] = r
        for j in range(c):
            if vals[i, j] < 0:
                vals[i, j] = 0
    return vals, arg


@njit(cache=True)
def bn_relu_max_backward(g, vals, arg, xhat, gamma, inv, s, training):
    """Backward of :func:`bn_relu_max`; only argmax rows carry upstream gradient."""
    a, c = g.shape
    n = a * s
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for i in range(a):
        for j in range(c):
            if vals[i, j] > 0:
                d = g[i, j]
                dbeta[j] += d
                dgamma[j] += d * xhat[i * s + arg[i, j], j]
    k = (gamma.astype(np.float64) * inv).astype(g.dtype)
    dz = np.empty((n, c), dtype=g.dtype)
    if training:
        mb = (dbeta / n).astype(g.dtype)
        mg = (dgamma / n).astype(g.dtype)
        for r in range(n):
            for j in range(c):
                dz[r, j] = -k[j] * (mb[j] + xhat[r, j] * mg[j])
    else:
        dz[:] = 0
    for i in range(a):
        for j in range(c):
            if vals[i, j] > 0:
                dz[i * s + arg[i, j], j] += k[j] * g[i, j]
    # row sum: the dense part sums to -k*(n*mb + mg*sum(xhat)) analytically,
    # but summing in float64 over the stored values keeps it exact to rounding
    dsum = np.zeros(c)
    for r in range(n):
        for j in range(c):
            dsum[j] += dz[r, j]
    return dz, dgamma, dbeta, dsum
