"""Pure-numpy fallback kernels for the hot inner loops.

All kernels take/return float64 C-contiguous arrays. Patch rows are laid out
channel-major: row index j = c*k1*k2 + u*k2 + v.
"""
import numpy as np

BACKEND = "numpy"


def im2col(x, k1, k2, s1, s2, p1, p2):
    """(B, n, h, w) -> (B, n*k1*k2, oh*ow) sliding-window patch matrix."""
    b, n, h, w = x.shape
    oh = (h + 2 * p1 - k1) // s1 + 1
    ow = (w + 2 * p2 - k2) // s2 + 1
    if p1 or p2:
        x = np.pad(x, ((0, 0), (0, 0), (p1, p1), (p2, p2)))
    cols = np.empty((b, n, k1, k2, oh, ow), dtype=x.dtype)
    for u in range(k1):
        for v in range(k2):
            cols[:, :, u, v] = x[:, :, u:u + oh * s1:s1, v:v + ow * s2:s2]
    return np.ascontiguousarray(cols.reshape(b, n * k1 * k2, oh * ow))


def col2im(cols, n, h, w, k1, k2, s1, s2, p1, p2):
    """Adjoint of im2col: scatter-add patch gradients back to input layout."""
    b = cols.shape[0]
    oh = (h + 2 * p1 - k1) // s1 + 1
    ow = (w + 2 * p2 - k2) // s2 + 1
    g = cols.reshape(b, n, k1, k2, oh, ow)
    dx = np.zeros((b, n, h + 2 * p1, w + 2 * p2), dtype=cols.dtype)
    for u in range(k1):
        for v in range(k2):
            dx[:, :, u:u + oh * s1:s1, v:v + ow * s2:s2] += g[:, :, u, v]
    if p1 or p2:
        dx = dx[:, :, p1:p1 + h, p2:p2 + w]
    return np.ascontiguousarray(dx)


def maxpool_forward(x, k, s):
    """Max pooling; also returns flat window-local argmax (first maximum wins)."""
    b, n, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    win = np.empty((b, n, k * k, oh, ow), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            win[:, :, u * k + v] = x[:, :, u:u + oh * s:s, v:v + ow * s:s]
    arg = np.argmax(win, axis=2)
    out = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]
    return out, arg.astype(np.int64)


def maxpool_backward(dout, arg, h, w, k, s):
    b, n, oh, ow = dout.shape
    dx = np.zeros((b, n, h, w), dtype=dout.dtype)
    u = arg // k
    v = arg % k
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = oi[None, None] * s + u
    cols = oj[None, None] * s + v
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(n)[None, :, None, None]
    np.add.at(dx, (bi, ci, rows, cols), dout)
    return dx


def avgpool_forward(x, k, s):
    b, n, h, w = x.shape
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    out = np.zeros((b, n, oh, ow), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            out += x[:, :, u:u + oh * s:s, v:v + ow * s:s]
    return out / (k * k)


def avgpool_backward(dout, h, w, k, s):
    b, n, oh, ow = dout.shape
    dx = np.zeros((b, n, h, w), dtype=dout.dtype)
    g = dout / (k * k)
    for u in range(k):
        for v in range(k):
            dx[:, :, u:u + oh * s:s, v:v + ow * s:s] += g
    return dx
