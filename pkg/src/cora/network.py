"""Minimal feed-forward ConvNet: forward evaluation for float and
quantized-plus-adapter models, cross-entropy, and reverse-mode gradients
with respect to the per-layer adapter rank variables only.

Images are batched float64 arrays of shape (batch, channels, h, w).
"""
from dataclasses import dataclass, field

import numpy as np

from . import backends
from .adapter import (LowRankAdapter, build_adapter_hard, butterworth_mask,
                      compose_adapter, factorize_residual, mask_gradient)
from .errors import NumericError, ShapeError
from .quantizer import dequantize, quantize


# ---------------------------------------------------------------------------
# layer specs

@dataclass(frozen=True)
class Conv:
    m: int
    n: int
    k1: int
    k2: int
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    bias: bool = False


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int
    s: int


@dataclass(frozen=True)
class AvgPool:
    k: int
    s: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out: int
    inp: int
    bias: bool = False


@dataclass
class Model:
    layers: list
    weights: dict          # layer index -> float64 weight tensor
    biases: dict           # layer index -> float64 bias vector
    input_shape: tuple     # (channels, h, w)
    class_count: int
    provenance: str = ""

    def conv_layer_ids(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, Conv)]


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray


def infer_shapes(layers, input_shape):
    """Per-layer output shapes from an input shape; raises on non-composition."""
    shapes = []
    cur = tuple(input_shape)
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            if len(cur) != 3 or cur[0] != layer.n:
                raise ShapeError(f"layer {i}: conv expects {layer.n} channels, got {cur}")
            h = (cur[1] + 2 * layer.padding[0] - layer.k1) // layer.stride[0] + 1
            w = (cur[2] + 2 * layer.padding[1] - layer.k2) // layer.stride[1] + 1
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i}: conv output collapsed to {h}x{w}")
            cur = (layer.m, h, w)
        elif isinstance(layer, (MaxPool, AvgPool)):
            if len(cur) != 3:
                raise ShapeError(f"layer {i}: pooling needs a spatial input, got {cur}")
            h = (cur[1] - layer.k) // layer.s + 1
            w = (cur[2] - layer.k) // layer.s + 1
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i}: pool output collapsed to {h}x{w}")
            cur = (cur[0], h, w)
        elif isinstance(layer, Flatten):
            cur = (int(np.prod(cur)),)
        elif isinstance(layer, Dense):
            if len(cur) != 1 or cur[0] != layer.inp:
                raise ShapeError(f"layer {i}: dense expects {layer.inp} features, got {cur}")
            cur = (layer.out,)
        elif isinstance(layer, ReLU):
            pass
        else:
            raise ShapeError(f"layer {i}: unknown layer type {type(layer).__name__}")
        shapes.append(cur)
    return shapes


# ---------------------------------------------------------------------------
# quantized model with adapters

@dataclass
class AdaptedQuantModel:
    base: Model
    qweights: dict         # layer index -> QuantizedTensor
    facts: dict            # conv layer index -> ResidualFactorization
    conv_ids: list         # adapted conv layer indices, in network order
    ranks: np.ndarray      # continuous rank per adapted conv layer
    order: int = 4
    adapter_mode: str = "soft"   # "soft" | "hard" | "none"
    hard_adapters: dict = field(default_factory=dict)

    def max_ranks(self):
        return np.array([self.facts[i].max_rank for i in self.conv_ids],
                        dtype=np.int64)

    def rank_index(self, layer_id):
        return self.conv_ids.index(layer_id)


def quantize_model(model, spec, adapt=True, order=4, init_ranks=None,
                   quantize_dense=True):
    """Quantize all conv/dense weights; factorize each conv residual when
    adapters are requested. Biases stay in floating point."""
    qweights = {}
    facts = {}
    conv_ids = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Conv) or (isinstance(layer, Dense) and quantize_dense):
            qweights[i] = quantize(model.weights[i], spec)
        if isinstance(layer, Conv) and adapt:
            dw = model.weights[i] - dequantize(qweights[i])
            facts[i] = factorize_residual(dw, layer=i, stride=layer.stride,
                                          padding=layer.padding)
            conv_ids.append(i)
    mode = "soft" if adapt else "none"
    if init_ranks is None:
        ranks = np.array([facts[i].max_rank for i in conv_ids], dtype=np.float64)
    else:
        ranks = np.asarray(init_ranks, dtype=np.float64).copy()
        if ranks.shape != (len(conv_ids),):
            raise ShapeError("init_ranks length does not match adapted conv layers")
    return AdaptedQuantModel(base=model, qweights=qweights, facts=facts,
                             conv_ids=conv_ids, ranks=ranks, order=order,
                             adapter_mode=mode)


def set_hard_adapters(m, int_ranks, adapter_spec=None):
    """Switch to finalized integer-rank adapters, optionally quantized.

    Adapter tensors are rounded through float32 so in-memory evaluation
    matches the 32-bit file format bit for bit.
    """
    m.adapter_mode = "hard"
    m.hard_adapters = {}
    for idx, lid in enumerate(m.conv_ids):
        ad = build_adapter_hard(m.facts[lid], int(int_ranks[idx]))
        a, b = ad.A, ad.B
        if adapter_spec is not None:
            a = dequantize(quantize(a, adapter_spec))
            b = dequantize(quantize(b, adapter_spec))
        a = a.astype(np.float32).astype(np.float64)
        b = b.astype(np.float32).astype(np.float64)
        m.hard_adapters[lid] = LowRankAdapter(A=a, B=b, rank=ad.rank,
                                              stride=ad.stride, padding=ad.padding)
    m.ranks = np.asarray(int_ranks, dtype=np.float64).copy()


def _soft_gain(m, idx):
    """Composed singular-value gain mask^2 * S for adapted layer position idx."""
    lid = m.conv_ids[idx]
    f = m.facts[lid]
    phi = butterworth_mask(m.ranks[idx], f.max_rank, m.order).values
    return phi * phi * f.S


def _effective_conv_matrix(m, lid):
    """Mode-1 weight matrix actually applied at conv layer lid."""
    w = dequantize(m.qweights[lid])
    mat = w.reshape(w.shape[0], -1)
    if m.adapter_mode == "soft" and lid in m.facts:
        idx = m.rank_index(lid)
        f = m.facts[lid]
        gain = _soft_gain(m, idx)
        return mat + (f.U * gain[None, :]) @ f.V.T
    if m.adapter_mode == "hard" and lid in m.hard_adapters:
        return mat + compose_adapter(m.hard_adapters[lid])
    return mat


# ---------------------------------------------------------------------------
# forward / backward engine

def _layer_matrices(model_like):
    """(layers, weight-matrix getter, biases) for Model or AdaptedQuantModel."""
    if isinstance(model_like, Model):
        def conv_mat(i):
            w = model_like.weights[i]
            return w.reshape(w.shape[0], -1)

        def dense_mat(i):
            return model_like.weights[i]

        return model_like.layers, conv_mat, dense_mat, model_like.biases
    m = model_like

    def conv_mat(i):
        return _effective_conv_matrix(m, i)

    def dense_mat(i):
        if i in m.qweights:
            return dequantize(m.qweights[i])
        return m.base.weights[i]

    return m.base.layers, conv_mat, dense_mat, m.base.biases


def _forward(model_like, images, want_caches=False):
    layers, conv_mat, dense_mat, biases = _layer_matrices(model_like)
    x = np.ascontiguousarray(np.asarray(images, dtype=np.float64))
    caches = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            b, n, h, w = x.shape
            if n != layer.n:
                raise ShapeError(f"layer {i}: expected {layer.n} channels, got {n}")
            cols = backends.im2col(x, layer.k1, layer.k2, layer.stride[0],
                                   layer.stride[1], layer.padding[0], layer.padding[1])
            oh = (h + 2 * layer.padding[0] - layer.k1) // layer.stride[0] + 1
            ow = (w + 2 * layer.padding[1] - layer.k2) // layer.stride[1] + 1
            wm = conv_mat(i)
            out = np.matmul(wm, cols)
            if layer.bias and i in biases:
                out = out + biases[i][None, :, None]
            caches.append(("conv", cols, (h, w), wm))
            x = np.ascontiguousarray(out.reshape(b, layer.m, oh, ow))
        elif isinstance(layer, ReLU):
            mask = x > 0
            caches.append(("relu", mask))
            x = x * mask
        elif isinstance(layer, MaxPool):
            out, arg = backends.maxpool_forward(x, layer.k, layer.s)
            caches.append(("maxpool", arg, x.shape[2:]))
            x = out
        elif isinstance(layer, AvgPool):
            caches.append(("avgpool", x.shape[2:]))
            x = backends.avgpool_forward(x, layer.k, layer.s)
        elif isinstance(layer, Flatten):
            caches.append(("flatten", x.shape))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            if x.shape[1] != layer.inp:
                raise ShapeError(f"layer {i}: expected {layer.inp} features, got {x.shape[1]}")
            wm = dense_mat(i)
            out = x @ wm.T
            if layer.bias and i in biases:
                out = out + biases[i][None, :]
            caches.append(("dense", x, wm))
            x = out
        else:
            raise ShapeError(f"unknown layer type {type(layer).__name__}")
    if want_caches:
        return x, caches
    return x


def forward(model_like, images):
    """Per-sample logits for a float Model or an AdaptedQuantModel."""
    return _forward(model_like, images)


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the labels (max-stabilized)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    return float(np.mean(logz - picked))


def _softmax(logits):
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def grad_wrt_ranks(m, images, labels):
    """(data loss, dloss/dranks) for a soft-adapter AdaptedQuantModel.

    Only the rank variables receive gradients; quantized weights and the
    factorizations are frozen.
    """
    if m.adapter_mode != "soft":
        raise NumericError("rank gradients require soft adapter mode")
    labels = np.asarray(labels, dtype=np.int64)
    logits, caches = _forward(m, images, want_caches=True)
    loss = cross_entropy(logits, labels)
    bsz = logits.shape[0]

    probs = _softmax(logits)
    probs[np.arange(bsz), labels] -= 1.0
    g = probs / bsz

    layers = m.base.layers
    grad = np.zeros(len(m.conv_ids), dtype=np.float64)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        cache = caches[i]
        if isinstance(layer, Dense):
            _, x_in, wm = cache
            g = g @ wm
        elif isinstance(layer, Flatten):
            g = g.reshape(cache[1])
        elif isinstance(layer, ReLU):
            g = g * cache[1]
        elif isinstance(layer, MaxPool):
            _, arg, (h, w) = cache
            g = backends.maxpool_backward(np.ascontiguousarray(g), arg, h, w,
                                          layer.k, layer.s)
        elif isinstance(layer, AvgPool):
            _, (h, w) = cache
            g = backends.avgpool_backward(np.ascontiguousarray(g), h, w,
                                          layer.k, layer.s)
        elif isinstance(layer, Conv):
            _, cols, (h, w), wm = cache
            b = g.shape[0]
            gm = g.reshape(b, layer.m, -1)
            if i in m.facts:
                idx = m.rank_index(i)
                f = m.facts[i]
                dw = np.einsum("bmp,bkp->mk", gm, cols, optimize=True)
                phi = butterworth_mask(m.ranks[idx], f.max_rank, m.order).values
                dphi = mask_gradient(m.ranks[idx], f.max_rank, m.order)
                dgain = 2.0 * phi * dphi * f.S
                diag = np.einsum("mr,mk,kr->r", f.U, dw, f.V, optimize=True)
                grad[idx] = np.dot(dgain, diag)
            if i > 0:
                dcols = np.matmul(wm.T, gm)
                g = backends.col2im(np.ascontiguousarray(dcols), layer.n, h, w,
                                    layer.k1, layer.k2, layer.stride[0],
                                    layer.stride[1], layer.padding[0],
                                    layer.padding[1])
    return loss, grad


def top1_accuracy(model_like, images, labels, batch_size=256):
    """Fraction of argmax predictions matching labels (ties: lowest index)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ShapeError("dataset is empty")
    hits = 0
    for start in range(0, len(labels), batch_size):
        logits = forward(model_like, images[start:start + batch_size])
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[start:start + batch_size]))
    return hits / len(labels)
