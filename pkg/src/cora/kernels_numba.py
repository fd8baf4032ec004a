"""Numba-compiled kernels for the hot inner loops.

Same contracts as kernels_numpy; loops are explicit so nopython compilation
applies. Single-threaded on purpose: runs must be deterministic.
"""
import numpy as np
from numba import njit

BACKEND = "numba"


@njit(cache=True)
def im2col(x, k1, k2, s1, s2, p1, p2):
    b, n, h, w = x.shape
    oh = (h + 2 * p1 - k1) // s1 + 1
    ow = (w + 2 * p2 - k2) // s2 + 1
    cols = np.zeros((b, n * k1 * k2, oh * ow), dtype=x.dtype)
    for bi in range(b):
        for c in range(n):
            for u in range(k1):
                for v in range(k2):
                    j = c * k1 * k2 + u * k2 + v
                    for oi in range(oh):
                        ii = oi * s1 + u - p1
                        if ii < 0 or ii >= h:
                            continue
                        for oj in range(ow):
                            jj = oj * s2 + v - p2
                            if 0 <= jj < w:
                                cols[bi, j, oi * ow + oj] = x[bi, c, ii, jj]
    return cols


@njit(cache=True)
def col2im(cols, n, h, w, k1, k2, s1, s2, p1, p2):
    b = cols.shape[0]
    oh = (h + 2 * p1 - k1) // s1 + 1
    ow = (w + 2 * p2 - k2) // s2 + 1
    dx = np.zeros((b, n, h, w), dtype=cols.dtype)
    for bi in range(b):
        for c in range(n):
            for u in range(k1):
                for v in range(k2):
                    j = c * k1 * k2 + u * k2 + v
                    for oi in range(oh):
                        ii = oi * s1 + u - p1
                        if ii < 0 or ii >= h:
                            continue
                        for oj in range(ow):
                            jj = oj * s2 + v - p2
                            if 0 <= jj < w:
                                dx[bi, c, ii, jj] += cols[bi, j, oi * ow + oj]
    return dx


@njit(cache=True)
def maxpool_forward(x, k, s):
    b, n, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    out = np.empty((b, n, oh, ow), dtype=x.dtype)
    arg = np.empty((b, n, oh, ow), dtype=np.int64)
    for bi in range(b):
        for c in range(n):
            for oi in range(oh):
                for oj in range(ow):
                    best = x[bi, c, oi * s, oj * s]
                    besta = 0
                    for u in range(k):
                        for v in range(k):
                            val = x[bi, c, oi * s + u, oj * s + v]
                            if val > best:
                                best = val
                                besta = u * k + v
                    out[bi, c, oi, oj] = best
                    arg[bi, c, oi, oj] = besta
    return out, arg


@njit(cache=True)
def maxpool_backward(dout, arg, h, w, k, s):
    b, n, oh, ow = dout.shape
    dx = np.zeros((b, n, h, w), dtype=dout.dtype)
    for bi in range(b):
        for c in range(n):
            for oi in range(oh):
                for oj in range(ow):
                    a = arg[bi, c, oi, oj]
                    dx[bi, c, oi * s + a // k, oj * s + a % k] += dout[bi, c, oi, oj]
    return dx


@njit(cache=True)
def avgpool_forward(x, k, s):
    b, n, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    out = np.zeros((b, n, oh, ow), dtype=x.dtype)
    for bi in range(b):
        for c in range(n):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            acc += x[bi, c, oi * s + u, oj * s + v]
                    out[bi, c, oi, oj] = acc / (k * k)
    return out


@njit(cache=True)
def avgpool_backward(dout, h, w, k, s):
    b, n, oh, ow = dout.shape
    dx = np.zeros((b, n, h, w), dtype=dout.dtype)
    for bi in range(b):
        for c in range(n):
            for oi in range(oh):
                for oj in range(ow):
                    g = dout[bi, c, oi, oj] / (k * k)
                    for u in range(k):
                        for v in range(k):
                            dx[bi, c, oi * s + u, oj * s + v] += g
    return dx
