"""Uniform n-bit weight quantization with min-max and normal (mu +/- k*sigma)
clipping, plus the quantization residual.

Conventions:
  - scale s = (beta - alpha) / (2^n - 1), always positive for a proper range
  - rounding is half-to-even
  - asymmetric mode: z = round(alpha / s), codes in [0, 2^n - 1]
  - symmetric mode: z = 0, codes in [-(2^(n-1)-1), 2^(n-1)-1]; the stored
    (alpha, beta) is the symmetric range +/- s*(2^n-1)/2 so the scale formula
    holds and re-quantizing a dequantized tensor is a fixed point
  - degenerate range (constant tensor): all-zero codes with a sentinel scale
    chosen so dequantization reproduces the constant exactly
"""
from dataclasses import dataclass

import numpy as np

from .errors import CoraError, NumericError, ShapeError


@dataclass(frozen=True)
class ClipScheme:
    kind: str          # "minmax" | "normal"
    k: float = 0.0     # only meaningful for "normal"

    def __post_init__(self):
        if self.kind not in ("minmax", "normal"):
            raise CoraError(f"unknown clip scheme {self.kind!r}")
        if self.kind == "normal" and not self.k > 0:
            raise CoraError("normal clipping requires k > 0")

    @staticmethod
    def minmax():
        return ClipScheme("minmax")

    @staticmethod
    def normal(k):
        return ClipScheme("normal", float(k))


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    clip: ClipScheme
    mode: str = "asymmetric"   # "asymmetric" | "symmetric"

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise CoraError(f"bits must be in 2..8, got {self.bits}")
        if self.mode not in ("asymmetric", "symmetric"):
            raise CoraError(f"unknown quantization mode {self.mode!r}")


@dataclass
class QuantizedTensor:
    codes: np.ndarray   # int64, same shape as the source tensor
    scale: float
    zero: int
    alpha: float
    beta: float
    spec: QuantSpec

    def code_range(self):
        return _code_range(self.spec)


def _code_range(spec):
    if spec.mode == "asymmetric":
        return 0, 2 ** spec.bits - 1
    qmax = 2 ** (spec.bits - 1) - 1
    return -qmax, qmax


def clip_range(w, clip):
    """Clipping interval (alpha, beta) of a tensor under a scheme."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ShapeError("cannot derive a clip range from an empty tensor")
    if clip.kind == "minmax":
        return float(np.min(w)), float(np.max(w))
    mu = float(np.mean(w))
    sigma = float(np.std(w))
    return mu - clip.k * sigma, mu + clip.k * sigma


def quantize(w, spec):
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise NumericError("cannot quantize a tensor with non-finite entries")
    alpha, beta = clip_range(w, spec.clip)

    if beta <= alpha:
        # Constant tensor: zero codes, (scale, zero) picked to reproduce it.
        c = alpha
        if c == 0.0:
            scale, zero = 1.0, 0
        else:
            scale, zero = abs(c), (1 if c > 0 else -1)
        codes = np.zeros(w.shape, dtype=np.int64)
        return QuantizedTensor(codes, scale, zero, alpha, beta, spec)

    if spec.mode == "symmetric":
        bound = max(abs(alpha), abs(beta))
        qmax = 2 ** (spec.bits - 1) - 1
        scale = bound / qmax
        zero = 0
        half = scale * (2 ** spec.bits - 1) / 2.0
        clipped = np.clip(w, alpha, beta)
        lo, hi = -qmax, qmax
        codes = np.clip(np.round(clipped / scale), lo, hi).astype(np.int64)
        return QuantizedTensor(codes, scale, zero, -half, half, spec)

    scale = (beta - alpha) / (2 ** spec.bits - 1)
    zero = int(np.round(alpha / scale))
    clipped = np.clip(w, alpha, beta)
    lo, hi = 0, 2 ** spec.bits - 1
    codes = np.clip(np.round(clipped / scale) - zero, lo, hi).astype(np.int64)
    return QuantizedTensor(codes, scale, zero, alpha, beta, spec)


def dequantize(q):
    return q.scale * (q.codes.astype(np.float64) + q.zero)


def residual(w, spec):
    """Quantization residual: w minus its quantize/dequantize roundtrip."""
    w = np.asarray(w, dtype=np.float64)
    return w - dequantize(quantize(w, spec))
