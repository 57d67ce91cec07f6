"""Declarative CNN/MLP architectures, forward pass, training and evaluation.

A model is described by a :class:`ModelSpec`; its weights live in a plain
``dict`` mapping ``"<layer>.weight"`` / ``"<layer>.bias"`` to float64
arrays (a *parameter set*).  Conv weights are [out, in, k1, k2]; dense
weights are [out, in].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigurationError, InputError, UsageError

ParameterSet = dict  # name -> np.ndarray


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv2d" | "dense"
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    activation: str = "relu"  # "relu" | "none"
    has_bias: bool = True
    pool: int = 1  # max-pool window after the activation (conv2d only)

    def __post_init__(self):
        if self.kind not in ("conv2d", "dense"):
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError(f"{self.name}: channel counts must be >= 1")
        if self.activation not in ("relu", "none"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.pool < 1 or (self.pool > 1 and self.kind != "conv2d"):
            raise ConfigurationError(f"{self.name}: pooling is only defined for conv2d layers")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, *self.kernel)
        return (self.out_channels, self.in_channels)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if not self.layers:
            raise ConfigurationError("a model needs at least one layer")
        if self.layers[-1].out_channels != self.num_classes:
            raise ConfigurationError("last layer must output num_classes channels")
        if len({l.name for l in self.layers}) != len(self.layers):
            raise ConfigurationError("layer names must be unique")
        self.activation_shapes()  # validates channel compatibility

    def activation_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample input shape of every layer, followed by the output shape."""
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            if layer.kind == "conv2d":
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ConfigurationError(f"{layer.name}: expects {layer.in_channels} channels, got {shape}")
                h = T.conv_output_size(shape[1], layer.kernel[0], layer.stride, 0)
                w = T.conv_output_size(shape[2], layer.kernel[1], layer.stride, 0)
                h, w = h // layer.pool, w // layer.pool
                if h < 1 or w < 1:
                    raise ConfigurationError(f"{layer.name}: kernel larger than input {shape}")
                shapes.append(shape)
                shape = (layer.out_channels, h, w)
            else:
                flat = int(np.prod(shape))
                if flat != layer.in_channels:
                    raise ConfigurationError(f"{layer.name}: expects {layer.in_channels} features, got {flat}")
                shapes.append(shape)
                shape = (layer.out_channels,)
        shapes.append(shape)
        return shapes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for layer in self.layers:
            out[f"{layer.name}.weight"] = layer.weight_shape
            if layer.has_bias:
                out[f"{layer.name}.bias"] = (layer.out_channels,)
        return out

    def num_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


def cnn_spec(input_shape=(1, 28, 28), conv_channels=(16, 32), kernel=(5, 5), stride=1, pool=2,
             num_classes=10) -> ModelSpec:
    """Conv -> ReLU -> max-pool blocks followed by one dense classifier."""
    layers = []
    c, h, w = input_shape
    for i, out in enumerate(conv_channels, start=1):
        layers.append(LayerSpec(f"conv{i}", "conv2d", c, out, tuple(kernel), stride, pool=pool))
        c = out
        h = T.conv_output_size(h, kernel[0], stride, 0) // pool
        w = T.conv_output_size(w, kernel[1], stride, 0) // pool
    layers.append(LayerSpec("fc", "dense", c * h * w, num_classes, activation="none"))
    return ModelSpec(tuple(layers), tuple(input_shape), num_classes)


def mlp_spec(input_dim: int, hidden=(32,), num_classes=10) -> ModelSpec:
    layers = []
    d = input_dim
    for i, h in enumerate(hidden, start=1):
        layers.append(LayerSpec(f"fc{i}", "dense", d, h))
        d = h
    layers.append(LayerSpec("out", "dense", d, num_classes, activation="none"))
    return ModelSpec(tuple(layers), (input_dim,), num_classes)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParameterSet:
    """Uniform in +-1/sqrt(fan_in) for weights and biases alike."""
    params = {}
    for layer in spec.layers:
        shape = layer.weight_shape
        bound = 1.0 / math.sqrt(int(np.prod(shape[1:])))
        params[f"{layer.name}.weight"] = rng.uniform(-bound, bound, size=shape)
        if layer.has_bias:
            params[f"{layer.name}.bias"] = rng.uniform(-bound, bound, size=layer.out_channels)
    return params


def validate_params(spec: ModelSpec, params: Mapping) -> None:
    expected = spec.param_shapes()
    if set(expected) != set(params):
        raise ConfigurationError(f"parameter names {sorted(params)} do not match spec {sorted(expected)}")
    for name, shape in expected.items():
        got = np.shape(params[name].data if isinstance(params[name], T.Tensor) else params[name])
        if tuple(got) != shape:
            raise ConfigurationError(f"{name}: shape {got} does not match spec {shape}")


def forward(spec: ModelSpec, params: Mapping, batch) -> T.Tensor:
    """Logits [N, num_classes]; ``params`` values may be arrays or Tensors."""
    x = T.as_tensor(batch)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise InputError(f"batch shape {x.shape} does not match input shape {spec.input_shape}")
    n = x.shape[0]
    for layer in spec.layers:
        w = T.as_tensor(params[f"{layer.name}.weight"])
        b = T.as_tensor(params[f"{layer.name}.bias"]) if layer.has_bias else None
        if layer.kind == "conv2d":
            x = T.conv2d(x, w, stride=layer.stride)
            if b is not None:
                x = T.add(x, T.reshape(b, (1, layer.out_channels, 1, 1)))
        else:
            if len(x.shape) != 2:
                x = T.reshape(x, (n, -1))
            x = T.matmul(x, T.transpose(w, (1, 0)))
            if b is not None:
                x = T.add(x, b)
        if layer.activation == "relu":
            x = T.relu(x)
        if layer.pool > 1:
            x = T.maxpool2d(x, layer.pool)
    return x


def fit(params: Mapping[str, np.ndarray], trainable, loss_fn: Callable, data: Dataset, epochs: int,
        lr: float | Callable[[int], float], seed: int, batch_size: int = 32,
        optimizer: str = "sgd", on_epoch: Callable[[int, dict], None] | None = None) -> dict:
    """Generic mini-batch loop shared by every trainer in the package.

    ``loss_fn(tensors, xb, yb)`` receives a dict in which the ``trainable``
    names are grad-enabled Tensors and everything else is constant.  ``lr``
    is either a number or a function of the 1-based epoch index.
    ``on_epoch(epoch, params)`` is called after every epoch.  Returns a new dict; the input mapping is not modified.
    """
    if len(data) == 0:
        raise UsageError("cannot train on an empty dataset")
    trainable = list(trainable)
    params = dict(params)
    if epochs <= 0:
        return params
    rng = np.random.default_rng(seed)
    opt = T.make_optimizer(optimizer)
    n = len(data)
    for epoch in range(1, epochs + 1):
        rate = lr(epoch) if callable(lr) else lr
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            leaves = {k: T.Tensor(params[k], requires_grad=True) for k in trainable}
            tensors = {**params, **leaves}
            loss = loss_fn(tensors, data.x[idx], data.y[idx])
            grads = T.grad(loss, leaves)
            params = opt.step(params, grads, rate, trainable)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params


def local_train(spec: ModelSpec, params: Mapping, data: Dataset, epochs: int, lr: float, seed: int,
                batch_size: int = 32, optimizer: str = "sgd") -> ParameterSet:
    """Cross-entropy training of every parameter for ``epochs`` full passes."""
    validate_params(spec, params)

    def loss_fn(p, xb, yb):
        return T.cross_entropy(forward(spec, p, xb), yb)

    return fit(params, list(params), loss_fn, data, epochs, lr, seed, batch_size, optimizer)


def predict_logits(spec: ModelSpec, params: Mapping, x: np.ndarray, chunk: int = 1000) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([forward(spec, params, x[i:i + chunk]).data for i in range(0, len(x), chunk)])


def evaluate(spec: ModelSpec, params: Mapping, data: Dataset) -> dict[str, float]:
    """Accuracy (argmax, ties to the lowest class) and mean cross-entropy."""
    if len(data) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    logits = predict_logits(spec, params, data.x)
    pred = np.argmax(logits, axis=1)
    with T.no_grad():
        loss = T.cross_entropy(T.Tensor(logits), data.y).item()
    return {"accuracy": float(np.mean(pred == data.y)), "loss": float(loss)}
