"""Training-free conversion of a quantization-residual convolution into a
rank-r adapter pair (A, B), with hard truncation and a differentiable
Butterworth soft mask over the singular values.

Factor layout: A is (r, n, k1, k2) and runs with the host layer's stride and
padding; B is (m, r, 1, 1), stride 1, no padding. Composing their mode-1
matrices reproduces the truncated SVD of the residual's mode-1 unfolding.
"""
from dataclasses import dataclass

import numpy as np

from .errors import CoraError, ShapeError
from .tensor_ops import matricize_mode1, svd, tensorize_mode1


@dataclass
class ResidualFactorization:
    layer: int
    U: np.ndarray          # (m, R)
    S: np.ndarray          # (R,), descending, >= 0
    V: np.ndarray          # (n*k1*k2, R)
    max_rank: int
    fold_shape: tuple      # (n, k1, k2)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)


@dataclass
class LowRankAdapter:
    A: np.ndarray          # (r, n, k1, k2)
    B: np.ndarray          # (m, r, 1, 1)
    rank: int
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)


@dataclass
class ButterworthMask:
    cutoff: float
    order: int
    values: np.ndarray     # (R,), in (0, 1]


def factorize_residual(dw, layer=0, stride=(1, 1), padding=(0, 0)):
    dw = np.asarray(dw, dtype=np.float64)
    if dw.ndim != 4:
        raise ShapeError(f"expected a 4-order residual tensor, got order {dw.ndim}")
    u, s, v = svd(matricize_mode1(dw))
    return ResidualFactorization(
        layer=layer, U=u, S=s, V=v, max_rank=int(s.shape[0]),
        fold_shape=tuple(dw.shape[1:]), stride=tuple(stride),
        padding=tuple(padding))


def build_adapter_hard(f, r):
    """Truncate the factorization at integer rank r; sqrt(S) on each factor."""
    r = int(r)
    if not 1 <= r <= f.max_rank:
        raise CoraError(f"rank {r} out of bounds [1, {f.max_rank}]")
    sq = np.sqrt(f.S[:r])
    a_mat = sq[:, None] * f.V[:, :r].T
    b_mat = f.U[:, :r] * sq[None, :]
    return LowRankAdapter(
        A=tensorize_mode1(a_mat, f.fold_shape),
        B=b_mat.reshape(b_mat.shape[0], r, 1, 1),
        rank=r, stride=f.stride, padding=f.padding)


def butterworth_mask(r_l, R_l, k):
    """Smooth low-pass mask over singular value indices 1..R_l with cutoff r_l."""
    if not r_l > 0:
        raise CoraError(f"cutoff must be positive, got {r_l}")
    if not k >= 1:
        raise CoraError(f"order must be >= 1, got {k}")
    idx = np.arange(1, int(R_l) + 1, dtype=np.float64)
    with np.errstate(over="ignore"):
        vals = 1.0 / np.sqrt(1.0 + (idx / r_l) ** (2 * k))
    return ButterworthMask(cutoff=float(r_l), order=int(k), values=vals)


def mask_gradient(r_l, R_l, k):
    """d(mask)/d(cutoff) per index; analytic, overflow-safe for sharp orders."""
    if not r_l > 0:
        raise CoraError(f"cutoff must be positive, got {r_l}")
    idx = np.arange(1, int(R_l) + 1, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        u = (idx / r_l) ** (2 * k)
        grad = (k / r_l) * u * (1.0 + u) ** (-1.5)
        # For huge u the product above is inf*0; use the u^(-1/2) asymptote.
        big = u > 1e150
        grad[big] = (k / r_l) / np.sqrt(u[big])
    return np.nan_to_num(grad, nan=0.0, posinf=0.0, neginf=0.0)


def build_adapter_soft(f, r_l, k):
    """Full-width adapter with mask * sqrt(S) on both factors (smooth in r_l).

    The composed operator then carries mask^2 * S on its singular values.
    """
    w = butterworth_mask(r_l, f.max_rank, k).values * np.sqrt(f.S)
    a_mat = w[:, None] * f.V.T
    b_mat = f.U * w[None, :]
    return LowRankAdapter(
        A=tensorize_mode1(a_mat, f.fold_shape),
        B=b_mat.reshape(b_mat.shape[0], f.max_rank, 1, 1),
        rank=f.max_rank, stride=f.stride, padding=f.padding)


def compose_adapter(adapter):
    """Effective mode-1 residual matrix B_(1) @ A_(1) of an adapter pair."""
    return matricize_mode1(adapter.B) @ matricize_mode1(adapter.A)
