"""Comparators: histogram mutual information, magnitude pruning and a FedAvg baseline.

Mutual information between two parameter sets is a plug-in estimate from a
2-d histogram of paired values.  Sets of equal size are paired position by
position.  Sets of different sizes (a global model against a smaller
sub-model) are each sorted and the larger one is subsampled at evenly
spaced ranks, so the i-th smallest value of one set is paired with the
i-th smallest of the other.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import compression as comp
from . import federation as fed
from .compression import sub_model_spec
from .config import ExperimentConfig
from .data import Dataset
from .errors import ConfigurationError, UsageError
from .models import LayerSpec, ModelSpec, evaluate, init_params, local_train

MI_BINS = 32


@dataclass(frozen=True)
class MIEstimate:
    value: float
    bins: int
    samples: int
    units: str


def flatten_params(params: Mapping) -> np.ndarray:
    """All tensors concatenated in sorted-name order."""
    if not params:
        raise UsageError("empty parameter set")
    return np.concatenate([np.ravel(params[k]) for k in sorted(params)])


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def pair_values(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positional pairs for equal lengths, rank pairs otherwise."""
    if a.size == 0 or b.size == 0:
        raise UsageError("cannot pair empty value sets")
    if a.size == b.size:
        return a, b
    a, b = np.sort(a), np.sort(b)
    n = min(a.size, b.size)
    pick = lambda v: v[np.floor(np.arange(n) * v.size / n).astype(int)] if v.size > n else v
    return pick(a), pick(b)


def mutual_information_values(x: np.ndarray, z: np.ndarray, bins: int = MI_BINS, units: str = "bits") -> MIEstimate:
    if bins < 2:
        raise UsageError("need at least 2 bins")
    if units not in ("bits", "nats"):
        raise UsageError(f"unknown units {units!r}")
    x, z = pair_values(np.ravel(x), np.ravel(z))
    joint, _, _ = np.histogram2d(x, z, bins=bins)
    pxz = joint / joint.sum()
    value = _entropy(pxz.sum(axis=1)) + _entropy(pxz.sum(axis=0)) - _entropy(pxz.ravel())
    value = max(value, 0.0)
    if units == "bits":
        value /= math.log(2)
    return MIEstimate(value, bins, len(x), units)


def mutual_information(a: Mapping, b: Mapping, bins: int = MI_BINS, units: str = "bits") -> MIEstimate:
    """Plug-in MI between the value sets of two parameter sets."""
    return mutual_information_values(flatten_params(a), flatten_params(b), bins, units)


def entropy_values(x: np.ndarray, bins: int = MI_BINS, units: str = "bits") -> float:
    """Plug-in entropy with the same binning the MI estimator uses on its first axis."""
    counts, _ = np.histogram(np.ravel(x), bins=bins)
    h = _entropy(counts / counts.sum())
    return h / math.log(2) if units == "bits" else h


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------

def _kept(count: int, ratio: float, name: str) -> int:
    k = int(math.floor(ratio * count + 0.5))
    if k < 1:
        raise ConfigurationError(f"{name}: ratio {ratio} prunes all {count} channels")
    return k


def magnitude_prune(spec: ModelSpec, params: Mapping, ratio: float, level: str = "filter"
                    ) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    """Keep ``round(ratio * c)`` channels of every hidden layer, ranked by L1 norm.

    ``level="filter"`` ranks a layer's output filters by the L1 norm of
    their weights; ``level="channel"`` ranks the same channels by the L1 norm
    of the next layer's weights that read them.  The first layer's input
    and the last layer's output are never pruned, and the next layer's
    weights are sliced to match.
    """
    if not 0 < ratio < 1:
        raise ConfigurationError("pruning ratio must lie in (0, 1)")
    if level not in ("filter", "channel"):
        raise ConfigurationError(f"unknown pruning level {level!r}")
    shapes = spec.activation_shapes()
    out = {k: np.array(v, copy=True) for k, v in params.items()}
    layers = list(spec.layers)
    for i in range(len(layers) - 1):
        layer, nxt = layers[i], layers[i + 1]
        w = out[f"{layer.name}.weight"]
        w_next = out[f"{nxt.name}.weight"]
        c = w.shape[0]
        per = 1
        if nxt.kind == "dense" and layer.kind == "conv2d":
            per = int(np.prod(shapes[i + 1][1:]))  # spatial positions per channel after flattening
            reading = w_next.reshape(w_next.shape[0], c, per)
        else:
            reading = w_next.reshape(w_next.shape[0], c, -1)
        if level == "filter":
            score = np.abs(w).reshape(c, -1).sum(axis=1)
        else:
            score = np.abs(reading).sum(axis=(0, 2))
        keep = np.sort(np.argsort(score, kind="stable")[::-1][:_kept(c, ratio, layer.name)])
        out[f"{layer.name}.weight"] = w[keep]
        if layer.has_bias:
            out[f"{layer.name}.bias"] = out[f"{layer.name}.bias"][keep]
        sliced = reading[:, keep]
        new_in = len(keep) * per if per > 1 else len(keep)
        out[f"{nxt.name}.weight"] = sliced.reshape(w_next.shape[0], new_in, *w_next.shape[2:])
        layers[i] = LayerSpec(layer.name, layer.kind, layer.in_channels, len(keep), layer.kernel, layer.stride,
                              layer.activation, layer.has_bias, layer.pool)
        layers[i + 1] = LayerSpec(nxt.name, nxt.kind, new_in, nxt.out_channels, nxt.kernel, nxt.stride,
                                  nxt.activation, nxt.has_bias, nxt.pool)
    pruned = ModelSpec(tuple(layers), spec.input_shape, spec.num_classes)
    return pruned, out


# ---------------------------------------------------------------------------
# FedAvg baseline
# ---------------------------------------------------------------------------

def fedavg(models, counts) -> dict[str, np.ndarray]:
    """Sample-weighted parameter average."""
    if not models or len(models) != len(counts):
        raise UsageError("need one sample count per model")
    s = np.asarray(counts, dtype=np.float64)
    return {k: sum(sj * m[k] for sj, m in zip(s, models)) / s.sum() for k in models[0]}


def fedavg_baseline(cfg: ExperimentConfig, data: Dataset | None = None, rounds: int | None = None,
                    progress=None) -> list[dict]:
    """Classical FedAvg where every client trains the smallest sub-model architecture.

    Splits, partitions and seeds match :func:`fedconv.federation.run_experiment`
    for the same config; the small model is initialized directly (no
    compression) and there is no server pre-training.
    """
    env, state = fed.setup(cfg, data)
    spec = sub_model_spec(env.spec, min(cfg.sr_grid))
    params = init_params(spec, np.random.default_rng(cfg.sub_seed("init")))
    reports = []
    for r in range(1, (cfg.rounds if rounds is None else rounds) + 1):
        start = time.perf_counter()
        uploads = [fed.client_update(c, spec, params, cfg, r) for c in fed.select_clients(cfg, state.clients, r)]
        params = fedavg([u[0] for u in uploads], [u[1] for u in uploads])
        metrics = evaluate(spec, params, env.server_test)
        accs = {str(c.client_id): u[2] for c, u in zip(fed.select_clients(cfg, state.clients, r), uploads)}
        report = {
            "round": r,
            "global_accuracy": metrics["accuracy"],
            "global_loss": metrics["loss"],
            "mean_client_accuracy": fed._mean(accs.values()),
            "client_accuracy": accs,
            "weight_vectors": [],
            "seconds": time.perf_counter() - start,
        }
        reports.append(report)
        if progress is not None:
            progress(report)
    return reports


# ---------------------------------------------------------------------------
# compression versus pruning
# ---------------------------------------------------------------------------

def train_reference_model(cfg: ExperimentConfig, data: Dataset | None = None, epochs: int | None = None):
    """A centrally trained global model for the comparison studies.

    Trains on the client pool (the server never sees it in a federated run,
    but here it only serves to get a well-trained model) and returns
    ``(env, params)``.
    """
    data = fed.load_dataset(cfg) if data is None else data
    splits = fed.split_dataset(data, cfg.sub_seed("split"))
    env, state = fed.setup(cfg, data)
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    params = local_train(env.spec, state.global_params, splits["client_pool_train"], epochs, cfg.local_lr,
                         cfg.sub_seed("training"), cfg.batch_size, cfg.optimizer)
    return env, params


def pruning_mi_study(cfg: ExperimentConfig, data: Dataset | None = None, sr: float = 0.5,
                     train_epochs: int | None = None) -> dict:
    """MI and accuracy of a compressed sub-model against channel- and filter-pruned models of the same size."""
    env, g = train_reference_model(cfg, data, train_epochs)
    opts = fed.pipeline_options(cfg)
    plan = comp.derive_plan(env.spec, sr, cfg.stride, cfg.padding)
    cp = comp.init_pipeline_params(plan, np.random.default_rng(cfg.sub_seed("init")), opts)
    cp = comp.finetune_compression(g, plan, cp, env.server_train, cfg.conv_epochs, opts, fed.schedule(cfg),
                                   cfg.sub_seed("training"), cfg.batch_size, cfg.optimizer)
    candidates = {
        "self": (env.spec, g),
        "conv-compressed": (plan.sub_spec, comp.compress_model(g, plan, cp, opts)),
        "channel-pruned": magnitude_prune(env.spec, g, sr, "channel"),
        "filter-pruned": magnitude_prune(env.spec, g, sr, "filter"),
    }
    rows = {}
    for name, (spec, params) in candidates.items():
        rows[name] = {
            "mi_bits": mutual_information(g, params).value,
            "accuracy": evaluate(spec, params, env.server_test)["accuracy"],
            "params": int(sum(np.size(v) for v in params.values())),
        }
    return rows


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_MODES = ("naive-agg", "no-pretrain", "fedavg-baseline", "pruning-mi")


def ablation_runs(cfg: ExperimentConfig, mode: str, data: Dataset | None = None, rounds: int | None = None,
                  progress=None) -> dict[str, list[dict]]:
    """Round reports of the two arms of a federated ablation, keyed by arm name."""
    data = fed.load_dataset(cfg) if data is None else data
    if mode == "naive-agg":
        arms = {"weighted": lambda: fed.run_experiment(cfg.replace(aggregation="weighted"), None, data, rounds, progress),
                "naive": lambda: fed.run_experiment(cfg.replace(aggregation="naive"), None, data, rounds, progress)}
    elif mode == "no-pretrain":
        arms = {"pretrain": lambda: fed.run_experiment(cfg.replace(pretrain=True), None, data, rounds, progress),
                "no-pretrain": lambda: fed.run_experiment(cfg.replace(pretrain=False), None, data, rounds, progress)}
    elif mode == "fedavg-baseline":
        arms = {"fedconv": lambda: fed.run_experiment(cfg, None, data, rounds, progress),
                "fedavg": lambda: fedavg_baseline(cfg, data, rounds, progress)}
    else:
        raise ConfigurationError(f"{mode!r} is not a federated ablation")
    return {name: run() for name, run in arms.items()}
