"""Transposed-convolution dilation of client sub-models back to the global shape.

The pipeline mirrors :mod:`fedconv.compression` layer for layer: the same
kernel, stride and padding, applied as transposed convolutions.  Each
client gets its own parameters, trained on server data with the client
model frozen.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .compression import (
    CompressionLayerConfig,
    CompressionPlan,
    PipelineOptions,
    Schedule,
    apply_layer,
    check_pipeline_params,
    identity_pipeline_params,
    init_pipeline_params,
    schedule_fn,
    trainable_names,
)
from .data import Dataset
from .errors import ConfigurationError, UsageError
from .models import ModelSpec, fit, forward, validate_params


@dataclass(frozen=True)
class TCPlan:
    """Per-layer transposed-convolution configs; each maps a sub-model slice to a global slice."""

    sr: float
    global_spec: ModelSpec
    sub_spec: ModelSpec
    layers: tuple[CompressionLayerConfig, ...] = field(repr=False)

    def __post_init__(self):
        for cfg in self.layers:
            for d_sub, d_glob, k in zip(cfg.sub_slice, cfg.global_slice, cfg.kernel):
                if (d_sub - 1) * cfg.stride - 2 * cfg.padding + k != d_glob:
                    raise ConfigurationError(f"{cfg.layer_name}: TC kernel {cfg.kernel} does not restore {d_glob}")


def derive_tc_plan(plan: CompressionPlan) -> TCPlan:
    return TCPlan(plan.sr, plan.global_spec, plan.sub_spec, plan.layers)


def init_tc_params(tc_plan: TCPlan, rng: np.random.Generator,
                   opts: PipelineOptions = PipelineOptions()) -> dict[str, np.ndarray]:
    """Same layout and initialization as the compression parameters."""
    return init_pipeline_params(tc_plan, rng, opts)


def identity_tc_params(tc_plan: TCPlan) -> dict[str, np.ndarray]:
    return identity_pipeline_params(tc_plan)


def dilate_model(client: Mapping, tc_plan: TCPlan, tp: Mapping,
                 opts: PipelineOptions = PipelineOptions()) -> dict:
    """Global-shaped parameters generated from a (frozen) client sub-model."""
    check_pipeline_params(tc_plan, tp)
    out = {}
    for cfg in tc_plan.layers:
        n = cfg.layer_name
        w_in = client[f"{n}.weight"]
        shape = np.shape(w_in.data if isinstance(w_in, T.Tensor) else w_in)
        expected = tc_plan.sub_spec.param_shapes()[f"{n}.weight"]
        if tuple(shape) != expected:
            raise ConfigurationError(f"{n}.weight: shape {shape} does not match the sub-model {expected}")
        bias = client.get(f"{n}.bias") if cfg.has_bias else None
        w, b = apply_layer(w_in, bias, tp, cfg, opts, transposed=True)
        out[f"{n}.weight"] = w
        if b is not None:
            out[f"{n}.bias"] = b
    if not any(isinstance(v, T.Tensor) and v.requires_grad for v in tp.values()):
        out = {k: v.data for k, v in out.items()}
    return out


def finetune_dilation(client: Mapping, tc_plan: TCPlan, tp: Mapping, data: Dataset, epochs: int,
                      opts: PipelineOptions = PipelineOptions(), schedule: Schedule = Schedule(),
                      seed: int = 0, batch_size: int = 32, optimizer: str = "sgd") -> dict:
    """Train one client's TC parameters so the dilated model fits the server data."""
    if len(data) == 0:
        raise UsageError("server data is empty")
    validate_params(tc_plan.sub_spec, client)
    check_pipeline_params(tc_plan, tp)
    frozen = {k: np.array(v, copy=True) for k, v in client.items()}
    spec = tc_plan.global_spec

    def loss_fn(p, xb, yb):
        big = dilate_model(frozen, tc_plan, p, opts)
        return T.cross_entropy(forward(spec, big, xb), yb)

    return fit(tp, trainable_names(tp, opts), loss_fn, data, epochs, schedule_fn(schedule, opts), seed,
               batch_size, optimizer)
