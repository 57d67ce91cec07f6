"""Normalized, learned-weight aggregation of dilated client models.

Every parameter tensor of every dilated model is min-max scaled to [0, 1].
Aggregation multiplies each model's normalized layer by a learnable scalar
``v[j, l]`` and by its sample count, then maps each model back through its
own affine record before summing::

    W_l = sum_j s_j * (min_jl + range_jl * v_jl * w_jl) / sum_j s_j

With ``v == 1`` this is exactly sample-weighted FedAvg.  The weights are
tuned on server data with a KL-divergence penalty that shrinks the share of
models whose parameter histograms drift from the previous global model.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import NumericalError, UsageError
from .models import ModelSpec, fit, forward, validate_params

KLD_BINS = 64
KLD_EPS = 1e-8

AffineRecord = dict  # name -> (min, max)


def normalize_params(models: Sequence[Mapping]) -> tuple[list[dict], list[AffineRecord]]:
    """Min-max scale each tensor of each model; constant tensors become 0.5."""
    if not models:
        raise UsageError("need at least one model")
    normalized, records = [], []
    for params in models:
        out, rec = {}, {}
        for name, arr in params.items():
            arr = np.asarray(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"{name} contains NaN or Inf")
            lo, hi = float(arr.min()), float(arr.max())
            rec[name] = (lo, hi)
            out[name] = np.full(arr.shape, 0.5) if hi == lo else (arr - lo) / (hi - lo)
        normalized.append(out)
        records.append(rec)
    return normalized, records


def denormalize(normalized: Mapping, record: AffineRecord) -> dict[str, np.ndarray]:
    """Inverse of the scaling for one model (a constant tensor comes back as its value)."""
    out = {}
    for name, arr in normalized.items():
        lo, hi = record[name]
        out[name] = np.full(np.shape(arr), lo) if hi == lo else lo + (hi - lo) * np.asarray(arr)
    return out


def combine(values: Sequence, v: Sequence[float], s: Sequence[float]):
    """Weighted combination in normalized space: ``sum_j v_j s_j w_j / sum_j s_j``."""
    if not len(values) == len(v) == len(s):
        raise UsageError("values, weights and sample counts differ in length")
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise UsageError("sample counts must be positive")
    total = sum(vj * sj * np.asarray(w) for w, vj, sj in zip(values, v, s))
    return total / s.sum()


def _check_inputs(spec, models, s, v=None):
    if not models:
        raise UsageError("need at least one model")
    if len(models) != len(s):
        raise UsageError(f"{len(models)} models but {len(s)} sample counts")
    if np.any(np.asarray(s) <= 0):
        raise UsageError("sample counts must be positive")
    for m in models:
        validate_params(spec, m)
    if v is not None and np.shape(v) != (len(models), len(spec.layers)):
        raise UsageError(f"weight vectors must have shape {(len(models), len(spec.layers))}, got {np.shape(v)}")


def _aggregation_terms(spec: ModelSpec, models, s):
    """Per tensor: constant part ``sum_j s_j min_j / S`` and per-model slopes ``s_j range_j w_j / S``."""
    normalized, records = normalize_params(models)
    s = np.asarray(s, dtype=np.float64)
    share = s / s.sum()
    terms = {}
    for name in spec.param_shapes():
        base = sum(share[j] * records[j][name][0] for j in range(len(models)))
        slopes = np.stack([share[j] * (records[j][name][1] - records[j][name][0]) * normalized[j][name]
                           for j in range(len(models))])
        terms[name] = (base, slopes)
    return terms


def _assemble(spec: ModelSpec, terms, v: Mapping):
    """Aggregated parameters as Tensors; ``v`` maps each layer name to its [n_models] weights."""
    out = {}
    for layer in spec.layers:
        n = v[layer.name].shape[0]
        row = T.reshape(T.as_tensor(v[layer.name]), (1, n))
        for name in (f"{layer.name}.weight", f"{layer.name}.bias") if layer.has_bias else (f"{layer.name}.weight",):
            base, slopes = terms[name]
            mixed = T.matmul(row, T.as_tensor(slopes.reshape(n, -1)))
            out[name] = T.add(T.reshape(mixed, slopes.shape[1:]), base)
    return out


def weighted_aggregate(spec: ModelSpec, models: Sequence[Mapping], v, s: Sequence[float]) -> dict[str, np.ndarray]:
    """Aggregate dilated models with per-(model, layer) weights ``v``."""
    v = np.asarray(v, dtype=np.float64)
    _check_inputs(spec, models, s, v)
    terms = _aggregation_terms(spec, models, s)
    with T.no_grad():
        cols = {layer.name: v[:, l] for l, layer in enumerate(spec.layers)}
        return {k: t.data for k, t in _assemble(spec, terms, cols).items()}


def naive_average(spec: ModelSpec, models: Sequence[Mapping], s: Sequence[float]) -> dict[str, np.ndarray]:
    """Aggregation with every weight fixed at 1 (sample-weighted averaging)."""
    return weighted_aggregate(spec, models, np.ones((len(models), len(spec.layers))), s)


def kl_divergence(p, q) -> float:
    """``sum p log(p / q)`` for probability vectors (zero entries of ``p`` contribute 0)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def layer_histograms(a: np.ndarray, b: np.ndarray, bins: int = KLD_BINS):
    """Smoothed, normalized histograms of two tensors over their joint value range."""
    if bins < 2:
        raise UsageError("need at least 2 bins")
    a, b = np.ravel(a), np.ravel(b)
    if a.size == 0 or b.size == 0:
        raise UsageError("cannot build a histogram of an empty layer")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        hi = lo + 1.0
    ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    ha = ha + KLD_EPS
    hb = hb + KLD_EPS
    return ha / ha.sum(), hb / hb.sum()


def kld(model: Mapping, global_prev: Mapping, bins: int = KLD_BINS) -> float:
    """Sum over tensors of KL(previous global || model) between value histograms."""
    if set(model) != set(global_prev):
        raise UsageError("models have different parameter names")
    total = 0.0
    for name in global_prev:
        p, q = layer_histograms(global_prev[name], model[name], bins)
        total += kl_divergence(p, q)
    return total


def tune_weight_vectors(spec: ModelSpec, models: Sequence[Mapping], s: Sequence[float], global_prev: Mapping,
                        data: Dataset, lam: float = 0.2, epochs: int = 10, lr: float = 0.001, seed: int = 0,
                        batch_size: int = 32, optimizer: str = "sgd", bins: int = KLD_BINS) -> np.ndarray:
    """Learn ``v`` [n_models, n_layers] starting from all ones.

    Objective per batch: cross-entropy of the aggregated model plus
    ``lam * sum_j KLD_j * share_j(v)``, where ``share_j`` is the mean of
    model j's weights times ``s_j / sum(s)``.  The histogram KLD is a
    constant, so the penalty acts linearly on ``v`` and pulls dissimilar
    models' weights down.  Returns the epoch-end iterate (or the all-ones
    start) with the lowest objective on the full server data.
    """
    if len(data) == 0:
        raise UsageError("server data is empty")
    if lam < 0:
        raise UsageError("lambda must be non-negative")
    _check_inputs(spec, models, s)
    n, layers = len(models), len(spec.layers)
    v0 = np.ones((n, layers))
    if epochs <= 0:
        return v0
    terms = _aggregation_terms(spec, models, s)
    s = np.asarray(s, dtype=np.float64)
    klds = np.array([kld(m, global_prev, bins) for m in models]) if lam > 0 else np.zeros(n)
    penalty = T.as_tensor(lam * klds * s / s.sum() / layers)
    names = [layer.name for layer in spec.layers]

    def loss_fn(p, xb, yb):
        loss = T.cross_entropy(forward(spec, _assemble(spec, terms, p), xb), yb)
        if lam > 0:
            for name in names:
                loss = T.add(loss, T.dot(p[name], penalty))
        return loss

    def objective(p):
        with T.no_grad():
            return loss_fn(p, data.x, data.y).item()

    # keep the best full-data iterate so tuning never ends worse than v = 1
    start = {name: v0[:, l] for l, name in enumerate(names)}
    best = [objective(start), start]

    def keep_best(_, p):
        value = objective(p)
        if value < best[0]:
            best[:] = [value, dict(p)]

    fit(start, names, loss_fn, data, epochs, lr, seed, batch_size, optimizer, on_epoch=keep_best)
    return np.stack([best[1][name] for name in names], axis=1)


def aggregate_loss(spec: ModelSpec, models, v, s, data: Dataset) -> float:
    """Server cross-entropy of the aggregate for weights ``v`` (used to compare against ``v = 1``)."""
    agg = weighted_aggregate(spec, models, v, s)
    with T.no_grad():
        return float(T.cross_entropy(forward(spec, agg, data.x), data.y).item())
