"""Dense tensor algebra: mode-1 fold/unfold, input unfolding, convolution, SVD.

Tensors are plain float64 numpy arrays in row-major order. A 4-order weight
tensor has shape (m, n, k1, k2): output channels, input channels, kernel.
"""
import numpy as np

from . import backends
from .errors import GeometryError, NumericError, ShapeError


def matricize_mode1(t):
    """Unfold (m, n, k1, k2) into (m, n*k1*k2); column j = c*k1*k2 + u*k2 + v."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4:
        raise ShapeError(f"expected a 4-order tensor, got order {t.ndim}")
    return t.reshape(t.shape[0], -1)


def tensorize_mode1(m, fold_shape):
    """Exact inverse of matricize_mode1 for the trailing (n, k1, k2) shape."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got order {m.ndim}")
    n, k1, k2 = fold_shape
    if m.shape[1] != n * k1 * k2:
        raise ShapeError(
            f"cannot fold {m.shape[1]} columns into shape {fold_shape}")
    return m.reshape(m.shape[0], n, k1, k2)


def unfold_input(x, kernel, stride=(1, 1), padding=(0, 0)):
    """Arrange (n, w, h) input into (n*k1*k2, w', h') patches for convolution.

    Patch rows are channel-major, matching matricize_mode1's column order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected a 3-order input, got order {x.ndim}")
    n, w, h = x.shape
    k1, k2 = kernel
    s1, s2 = stride
    p1, p2 = padding
    if w + 2 * p1 < k1 or h + 2 * p2 < k2:
        raise GeometryError(
            f"kernel {kernel} larger than padded input {(w + 2 * p1, h + 2 * p2)}")
    ow = (w + 2 * p1 - k1) // s1 + 1
    oh = (h + 2 * p2 - k2) // s2 + 1
    cols = backends.im2col(np.ascontiguousarray(x[None]), k1, k2, s1, s2, p1, p2)
    return cols[0].reshape(n * k1 * k2, ow, oh)


def conv2d(w, x, stride=(1, 1), padding=(0, 0)):
    """2D cross-correlation of weights (m, n, k1, k2) with input (n, w, h)."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"expected 4-order weights, got order {w.ndim}")
    if x.ndim != 3:
        raise ShapeError(f"expected 3-order input, got order {x.ndim}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"weight input channels {w.shape[1]} != input channels {x.shape[0]}")
    unf = unfold_input(x, (w.shape[2], w.shape[3]), stride, padding)
    _, ow, oh = unf.shape
    out = matricize_mode1(w) @ unf.reshape(unf.shape[0], -1)
    return out.reshape(w.shape[0], ow, oh)


def svd(m):
    """Deterministic thin SVD: returns (U, S, V) with M = U @ diag(S) @ V.T.

    Sign convention: the largest-magnitude component of each left singular
    vector is made positive.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NumericError("SVD input contains non-finite values")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    for i in range(u.shape[1]):
        pivot = np.argmax(np.abs(u[:, i]))
        if u[pivot, i] < 0:
            u[:, i] = -u[:, i]
            vt[i] = -vt[i]
    return np.ascontiguousarray(u), s, np.ascontiguousarray(vt.T)


def hadamard(a, b):
    """Elementwise product of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    return a * b
