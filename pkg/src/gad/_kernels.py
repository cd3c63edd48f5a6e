"""Fused loops for batch norm + LeakyReLU (forward and backward).

Statistics accumulate in float64 regardless of the array dtype.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def bn_act_forward(z, gamma, beta, eps, slope, use_act, training, run_mean, run_var):
    """Normalize ``z`` (rows, C) in place to x-hat; return (out, mean, var, istd)."""
    rows, c = z.shape
    mean = np.zeros(c)
    var = np.zeros(c)
    if training:
        for i in range(rows):
            for j in range(c):
                mean[j] += z[i, j]
        for j in range(c):
            mean[j] /= rows
        for i in range(rows):
            for j in range(c):
                d = z[i, j] - mean[j]
                var[j] += d * d
        for j in range(c):
            var[j] /= rows
    else:
        for j in range(c):
            mean[j] = run_mean[j]
            var[j] = run_var[j]
    istd = 1.0 / np.sqrt(var + eps)
    out = np.empty_like(z)
    for i in range(rows):
        for j in range(c):
            xh = (z[i, j] - mean[j]) * istd[j]
            z[i, j] = xh
            y = xh * gamma[j] + beta[j]
            if use_act and y <= 0:
                y = y * slope
            out[i, j] = y
    return out, mean, var, istd


@numba.njit(cache=True)
def bn_act_backward(g, xhat, out, gamma, istd, slope, use_act, training):
    """Return (dz, dgamma, dbeta) given upstream ``g`` and the saved x-hat / output."""
    rows, c = g.shape
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for i in range(rows):
        for j in range(c):
            gy = g[i, j]
            if use_act and out[i, j] <= 0:
                gy = gy * slope
            dbeta[j] += gy
            dgamma[j] += gy * xhat[i, j]
    k = gamma * istd
    mb = dbeta / rows
    mg = dgamma / rows
    dz = np.empty_like(g)
    for i in range(rows):
        for j in range(c):
            gy = g[i, j]
            if use_act and out[i, j] <= 0:
                gy = gy * slope
            if training:
                dz[i, j] = k[j] * (gy - mb[j] - xhat[i, j] * mg[j])
            else:
                dz[i, j] = k[j] * gy
    return dz, dgamma, dbeta
