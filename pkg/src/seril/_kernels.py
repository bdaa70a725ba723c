"""Compiled loops for max-pooling (channels-last)."""

import numpy as np
from numba import njit


@njit(cache=True)
def pool_forward(x, fx, fy, fz):
    n, X, Y, Z, c = x.shape
    ox, oy, oz = X // fx, Y // fy, Z // fz
    out = np.empty((n, ox, oy, oz, c), x.dtype)
    idx = np.empty((n, ox, oy, oz, c), np.int8)
    for s in range(n):
        for a in range(ox):
            for b in range(oy):
                for d in range(oz):
                    for ch in range(c):
                        best = x[s, a * fx, b * fy, d * fz, ch]
                        arg = 0
                        k = 0
                        for i in range(fx):
                            for j in range(fy):
                                for l in range(fz):
                                    v = x[s, a * fx + i, b * fy + j, d * fz + l, ch]
                                    if v > best:
                                        best = v
                                        arg = k
                                    k += 1
                        out[s, a, b, d, ch] = best
                        idx[s, a, b, d, ch] = arg
    return out, idx


@njit(cache=True)
def pool_backward(dout, idx, X, Y, Z, fx, fy, fz):
    n, ox, oy, oz, c = dout.shape
    dx = np.zeros((n, X, Y, Z, c), dout.dtype)
    for s in range(n):
        for a in range(ox):
            for b in range(oy):
                for d in range(oz):
                    for ch in range(c):
                        k = idx[s, a, b, d, ch]
                        i = k // (fy * fz)
                        j = (k // fz) % fy
                        l = k % fz
                        dx[s, a * fx + i, b * fy + j, d * fz + l, ch] = dout[s, a, b, d, ch]
    return dx
