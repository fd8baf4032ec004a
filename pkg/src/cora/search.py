"""Budget-constrained rank search: penalized objective, Adam updates with the
stabilization tricks (per-component gradient clipping, NaN reassignment,
solution clamping), heuristic baseline, and discretization of the result.
"""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CoraError, NumericError
from .network import Conv, grad_wrt_ranks, set_hard_adapters
from .quantizer import ClipScheme, QuantSpec


@dataclass
class SearchConfig:
    budget: float = 0.05
    penalty: float = 1.0        # lambda
    order: int = 4              # Butterworth mask order
    lr: float = 0.01
    iterations: int = 250
    batch_size: int = 32
    grad_clip: float = 0.2
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.budget <= 1.0:
            raise CoraError(f"budget must be in [0, 1], got {self.budget}")
        if self.penalty < 0:
            raise CoraError(f"penalty coefficient must be >= 0, got {self.penalty}")


@dataclass
class SearchTrace:
    iterations: list = field(default_factory=list)
    data_loss: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    running_budget: list = field(default_factory=list)
    rank_snapshots: list = field(default_factory=list)


def rank_norm_coeffs(model, conv_ids=None):
    """Per-layer coefficients omega_l = (1/R_l) * params_l / total params.

    Summing omega_l * R_l over the adapted layers gives exactly 1.
    """
    if conv_ids is None:
        conv_ids = model.conv_layer_ids()
    if not conv_ids:
        raise CoraError("model has no adaptable conv layers")
    sizes = []
    maxranks = []
    for i in conv_ids:
        layer = model.layers[i]
        assert isinstance(layer, Conv)
        sizes.append(layer.m * layer.n * layer.k1 * layer.k2)
        maxranks.append(min(layer.m, layer.n * layer.k1 * layer.k2))
    sizes = np.array(sizes, dtype=np.float64)
    maxranks = np.array(maxranks, dtype=np.float64)
    return (sizes / np.sum(sizes)) / maxranks


def budget_penalty(r, omega, b, lam):
    """Penalty lam * exp(max(0, omega.r - b)) and its gradient in r."""
    r = np.asarray(r, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    over = float(np.dot(omega, r)) - b
    if over <= 0:
        return lam * 1.0, np.zeros_like(r)
    val = lam * math.exp(over)
    return val, val * omega


def heuristic_ranks(b, bounds):
    """Proportional baseline: floor(b * R_l) per layer, clamped to >= 1."""
    if not 0 < b <= 1:
        raise CoraError(f"budget must be in (0, 1], got {b}")
    bounds = np.asarray(bounds, dtype=np.int64)
    return np.maximum(np.floor(b * bounds).astype(np.int64), 1)


def equivalent_bitwidth(n, m, b):
    """Effective bits per weight with n-bit net and m-bit adapters at budget b."""
    return n + m * b


def search(model, images, labels, cfg):
    """Adam loop over shuffled calibration mini-batches.

    Per iteration, in order: per-component gradient clipping, Adam update,
    NaN reassignment to rank 1, clamping to [1, R_l].
    Returns (final continuous ranks, omega, trace).
    """
    n_samples = len(labels)
    if n_samples == 0:
        raise CoraError("calibration set is empty")
    if model.adapter_mode != "soft":
        raise CoraError("search requires a soft-adapter model")
    omega = rank_norm_coeffs(model.base, model.conv_ids)
    bounds = model.max_ranks().astype(np.float64)

    r = model.ranks.astype(np.float64).copy()
    mom = np.zeros_like(r)
    vel = np.zeros_like(r)
    trace = SearchTrace()
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n_samples)
    cursor = 0
    bad_streak = 0

    for it in range(cfg.iterations):
        if cursor + cfg.batch_size > n_samples:
            perm = rng.permutation(n_samples)
            cursor = 0
        idx = perm[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size

        model.ranks = r
        data_loss, data_grad = grad_wrt_ranks(model, images[idx], labels[idx])
        pen, pen_grad = budget_penalty(r, omega, cfg.budget, cfg.penalty)

        if not math.isfinite(data_loss):
            bad_streak += 1
            if bad_streak >= 2:
                raise NumericError(
                    f"non-finite loss at iteration {it} twice in a row")
            data_grad = np.zeros_like(r)
        else:
            bad_streak = 0

        g = data_grad + pen_grad
        g = np.clip(g, -cfg.grad_clip, cfg.grad_clip)

        mom = cfg.adam_beta1 * mom + (1 - cfg.adam_beta1) * g
        vel = cfg.adam_beta2 * vel + (1 - cfg.adam_beta2) * g * g
        mhat = mom / (1 - cfg.adam_beta1 ** (it + 1))
        vhat = vel / (1 - cfg.adam_beta2 ** (it + 1))
        r = r - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)

        r = np.where(np.isnan(r), 1.0, r)
        r = np.clip(r, 1.0, bounds)

        trace.iterations.append(it)
        trace.data_loss.append(float(data_loss))
        trace.penalty.append(float(pen))
        trace.running_budget.append(float(np.dot(omega, r)))
        trace.rank_snapshots.append(r.copy())

    model.ranks = r
    return r, omega, trace


def finalize(model, ranks=None, adapter_spec=None, adapter_bits=8):
    """Round the relaxed ranks to integers and rebuild hard adapters.

    Adapters are quantized with min-max asymmetric at adapter_bits when
    adapter_spec is not given explicitly; pass adapter_bits=None to skip.
    """
    if ranks is None:
        ranks = model.ranks
    bounds = model.max_ranks()
    final = np.clip(np.round(np.asarray(ranks, dtype=np.float64)), 1,
                    bounds).astype(np.int64)
    if adapter_spec is None and adapter_bits is not None:
        adapter_spec = QuantSpec(bits=adapter_bits, clip=ClipScheme.minmax(),
                                 mode="asymmetric")
    set_hard_adapters(model, final, adapter_spec)
    return final


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "data_loss", "penalty", "running_budget"])
        for i, dl, pen, rb in zip(trace.iterations, trace.data_loss,
                                  trace.penalty, trace.running_budget):
            w.writerow([i, repr(dl), repr(pen), repr(rb)])


def write_solution_json(path, model, heuristic, optimal, final):
    bounds = model.max_ranks()
    doc = {
        "layers": [
            {
                "layer": int(lid),
                "max_rank": int(bounds[i]),
                "heuristic_rank": int(heuristic[i]),
                "optimal_rank": float(optimal[i]),
                "final_rank": int(final[i]),
            }
            for i, lid in enumerate(model.conv_ids)
        ]
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
