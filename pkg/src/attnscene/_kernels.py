"""Fused loops for the memory-bound layers (channels-last, C-contiguous).

Numpy would make one full pass over the activation per elementwise step; on
the first conv block of an 8 s clip that is ~65 MB per pass per batch.
Reductions over the batch accumulate in float64.
"""

import numba
import numpy as np

jit = numba.njit(cache=True, nogil=True)


@jit
def conv_fwd(xp, wt, sh, sw, out):
    B, Ho, Wo, O = out.shape
    kh, kw, C, _ = wt.shape
    acc = np.empty(O, dtype=out.dtype)  # at most kh*kw*C terms
    for b in range(B):
        for ho in range(Ho):
            for wo in range(Wo):
                acc[:] = 0
                for i in range(kh):
                    for j in range(kw):
                        for c in range(C):
                            v = xp[b, ho * sh + i, wo * sw + j, c]
                            w = wt[i, j, c]
                            for o in range(O):
                                acc[o] += v * w[o]
                out[b, ho, wo, :] = acc


@jit
def conv_bwd(xp, wt, dout, sh, sw, dwt, dxp, need_dx):
    B, Ho, Wo, O = dout.shape
    kh, kw, C, _ = wt.shape
    dwt[:] = 0.0
    for b in range(B):
        for ho in range(Ho):
            for wo in range(Wo):
                for i in range(kh):
                    for j in range(kw):
                        r = ho * sh + i
                        q = wo * sw + j
                        for c in range(C):
                            v = xp[b, r, q, c]
                            s = 0.0
                            for o in range(O):
                                g = dout[b, ho, wo, o]
                                dwt[i, j, c, o] += v * g
                                s += wt[i, j, c, o] * g
                            if need_dx:
                                dxp[b, r, q, c] += s


@jit
def channel_stats(x2):
    n, C = x2.shape
    mean = np.zeros(C)
    for k in range(n):
        for c in range(C):
            mean[c] += x2[k, c]
    mean /= n
    var = np.zeros(C)
    for k in range(n):
        for c in range(C):
            d = x2[k, c] - mean[c]
            var[c] += d * d
    var /= n
    return mean, var


@jit
def bn_fwd(x2, mean, inv_std, gamma, beta, relu, xhat, y):
    n, C = x2.shape
    for k in range(n):
        for c in range(C):
            h = (x2[k, c] - mean[c]) * inv_std[c]
            xhat[k, c] = h
            v = gamma[c] * h + beta[c]
            y[k, c] = v if (v > 0 or not relu) else 0.0


@jit
def bn_bwd(dy, y, xhat, gamma, inv_std, relu, train, dx):
    n, C = dy.shape
    dgamma = np.zeros(C)
    dbeta = np.zeros(C)
    for k in range(n):
        for c in range(C):
            if y[k, c] > 0 or not relu:
                d = dy[k, c]
                dbeta[c] += d
                dgamma[c] += d * xhat[k, c]
    scale = gamma * inv_std
    if train:
        mb = dbeta / n
        mg = dgamma / n
        for k in range(n):
            for c in range(C):
                d = dy[k, c] if (y[k, c] > 0 or not relu) else 0.0
                dx[k, c] = scale[c] * (d - mb[c] - xhat[k, c] * mg[c])
    else:
        for k in range(n):
            for c in range(C):
                dx[k, c] = scale[c] * dy[k, c] if (y[k, c] > 0 or not relu) else 0.0
    return dgamma, dbeta


@jit
def maxpool_fwd(x, wh, ww, sh, sw, out, idx):
    B, Ho, Wo, C = out.shape
    for b in range(B):
        for ho in range(Ho):
            for wo in range(Wo):
                for c in range(C):
                    best = x[b, ho * sh, wo * sw, c]
                    arg = 0
                    k = 0
                    for i in range(wh):
                        for j in range(ww):
                            v = x[b, ho * sh + i, wo * sw + j, c]
                            if v > best:
                                best = v
                                arg = k
                            k += 1
                    out[b, ho, wo, c] = best
                    idx[b, ho, wo, c] = arg


@jit
def maxpool_bwd(dout, idx, ww, sh, sw, dx):
    B, Ho, Wo, C = dout.shape
    for b in range(B):
        for ho in range(Ho):
            for wo in range(Wo):
                for c in range(C):
                    k = idx[b, ho, wo, c]
                    dx[b, ho * sh + k // ww, wo * sw + k % ww, c] += dout[b, ho, wo, c]
