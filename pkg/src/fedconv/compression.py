"""Convolutional compression of a global model into a smaller sub-model.

Each weight tensor is cut into 2-d slices, one per kernel position
([O, I, k1, k2] -> k1*k2 slices of [O, I]; dense [O, I] -> one slice).
A slice goes through two 1x1 convolutions with a residual connection,
then through a per-slice "compression" convolution whose kernel is sized
so that the output slice has the sub-model's channel counts, and finally
through the two-slope MLR activation.  Only the parameters of these small
convolutions are trained; the global model stays frozen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigurationError, UsageError
from .models import LayerSpec, ModelSpec, fit, forward, validate_params

PRE_CHANNELS = 16


@dataclass(frozen=True)
class PipelineOptions:
    """Switches for the stages of the compression/dilation pipeline.

    ``kernel_init`` is ``"box"`` (every kernel entry ``1/(k1*k2)``, so
    SR=1 starts as the identity) or ``"uniform"`` (+-1/sqrt(k1*k2)).
    """

    use_pre: bool = True
    use_mlr: bool = True
    use_weight_norm: bool = True
    use_scheduler: bool = True
    s_p: float = 0.85
    s_n: float = 0.001
    kernel_init: str = "delta"


@dataclass(frozen=True)
class Schedule:
    t_max: int = 4
    lr_min: float = 1e-5
    lr_max: float = 1e-3

    def __post_init__(self):
        if self.lr_max < self.lr_min:
            raise ConfigurationError("lr_max must be >= lr_min")
        if self.t_max < 1:
            raise ConfigurationError("t_max must be >= 1")


def cosine_lr(e: int, t_max: int, lr_min: float, lr_max: float) -> float:
    """Cosine-annealed learning rate at epoch ``e``.

    The curve reaches ``lr_min`` at ``e == t_max`` and climbs back to
    ``lr_max`` at ``e == 2 * t_max``; it is periodic with period ``2 * t_max``.
    """
    if lr_max < lr_min:
        raise ConfigurationError("lr_max must be >= lr_min")
    if t_max < 1 or e < 0:
        raise ConfigurationError("need t_max >= 1 and e >= 0")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(e / t_max * math.pi))


def round_channels(c: int, sr: float) -> int:
    """``round(sr * c)`` with halves rounded up, never below 1."""
    return max(1, int(math.floor(sr * c + 0.5)))


def sub_model_spec(spec: ModelSpec, sr: float) -> ModelSpec:
    """Shrink every channel count except the model input and the class outputs."""
    if not 0 < sr <= 1:
        raise ConfigurationError(f"shrinkage ratio must be in (0, 1], got {sr}")
    shapes = spec.activation_shapes()
    layers = []
    prev_out = None
    for i, layer in enumerate(spec.layers):
        last = i == len(spec.layers) - 1
        out = layer.out_channels if last else round_channels(layer.out_channels, sr)
        if i == 0:
            cin = layer.in_channels
        elif layer.kind == "dense" and len(shapes[i]) == 3:
            _, h, w = shapes[i]
            cin = prev_out * h * w
        else:
            cin = prev_out
        layers.append(LayerSpec(layer.name, layer.kind, cin, out, layer.kernel, layer.stride,
                                layer.activation, layer.has_bias, layer.pool))
        prev_out = out
    return ModelSpec(tuple(layers), spec.input_shape, spec.num_classes)


def solve_padding(d_in: int, d_out: int, k: int, stride: int) -> int:
    """Padding ``p`` such that ``(d_in + 2p - k) / stride + 1 == d_out``."""
    twice = (d_out - 1) * stride + k - d_in
    if twice < 0 or twice % 2:
        raise ConfigurationError(f"no integer padding maps {d_in} -> {d_out} with k={k}, s={stride}")
    return twice // 2


def axis_kernel(d_in: int, d_out: int, stride: int, padding: int) -> int:
    k = d_in + 2 * padding - (d_out - 1) * stride
    if k < 1:
        raise ConfigurationError(f"axis {d_in} -> {d_out} impossible with s={stride}, p={padding}")
    return k


@dataclass(frozen=True)
class CompressionLayerConfig:
    """Configuration of the per-slice convolutions for one layer.

    ``global_slice``/``sub_slice`` are the (out, in) shapes of one slice;
    ``kernel`` maps the former onto the latter under ``stride``/``padding``.
    Bias vectors are handled as a single (d, 1) slice with ``bias_kernel``.
    """

    layer_name: str
    kind: str
    global_slice: tuple[int, int]
    sub_slice: tuple[int, int]
    kernel: tuple[int, int]
    stride: int
    padding: int
    slice_count: int
    spatial: tuple[int, ...]
    has_bias: bool
    bias_kernel: tuple[int, int]
    in_ch: int = 1
    out_ch: int = 1

    def __post_init__(self):
        for d_in, d_out, k in zip(self.global_slice, self.sub_slice, self.kernel):
            if T.conv_output_size(d_in, k, self.stride, self.padding) != d_out:
                raise ConfigurationError(f"{self.layer_name}: kernel {self.kernel} violates the shape law")
        if self.slice_count < 1:
            raise ConfigurationError("slice_count must be >= 1")


@dataclass(frozen=True)
class CompressionPlan:
    sr: float
    global_spec: ModelSpec
    sub_spec: ModelSpec
    layers: tuple[CompressionLayerConfig, ...] = field(repr=False)


def derive_plan(global_spec: ModelSpec, sr: float, stride: int = 1, padding: int = 0) -> CompressionPlan:
    """Per-layer compression kernels for shrinkage ratio ``sr``.

    With the default ``stride=1, padding=0`` each kernel axis is
    ``d_in - d_out + 1``; other choices give ``d_in + 2p - (d_out - 1)s``.
    """
    sub = sub_model_spec(global_spec, sr)
    configs = []
    for g, s in zip(global_spec.layers, sub.layers):
        gs = (g.out_channels, g.in_channels)
        ss = (s.out_channels, s.in_channels)
        kernel = tuple(axis_kernel(a, b, stride, padding) for a, b in zip(gs, ss))
        spatial = tuple(g.kernel) if g.kind == "conv2d" else ()
        count = int(np.prod(spatial)) if spatial else 1
        bias_kernel = (axis_kernel(gs[0], ss[0], stride, padding), axis_kernel(1, 1, stride, padding))
        configs.append(CompressionLayerConfig(g.name, g.kind, gs, ss, kernel, stride, padding, count,
                                              spatial, g.has_bias, bias_kernel))
    return CompressionPlan(sr, global_spec, sub, tuple(configs))


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------

def reshape_for_compression(weight):
    """[O, I, k1, k2] -> [k1*k2, 1, O, I] (row-major kernel position); [O, I] -> [1, 1, O, I].

    Accepts arrays or Tensors and returns the same kind.
    """
    w = T.as_tensor(weight)
    if len(w.shape) == 4:
        o, i, k1, k2 = w.shape
        out = T.reshape(T.transpose(w, (2, 3, 0, 1)), (k1 * k2, 1, o, i))
    elif len(w.shape) == 2:
        out = T.reshape(w, (1, 1, *w.shape))
    else:
        raise ConfigurationError(f"cannot slice a rank-{len(w.shape)} weight")
    return out if isinstance(weight, T.Tensor) else out.data


def restore_from_slices(slices, spatial: tuple[int, ...]):
    """Inverse of :func:`reshape_for_compression`."""
    s = T.as_tensor(slices)
    _, _, o, i = s.shape
    if spatial:
        out = T.transpose(T.reshape(s, (*spatial, o, i)), (2, 3, 0, 1))
    else:
        out = T.reshape(s, (o, i))
    return out if isinstance(slices, T.Tensor) else out.data


# ---------------------------------------------------------------------------
# pipeline parameters
# ---------------------------------------------------------------------------

def _init_kernel(rng, count, kernel, how):
    k1, k2 = kernel
    if how == "box":
        return np.full((count, 1, k1, k2), 1.0 / (k1 * k2))
    if how == "delta":
        k = np.zeros((count, 1, k1, k2))
        k[:, :, 0, 0] = 1.0
        return k
    if how == "uniform":
        bound = 1.0 / math.sqrt(k1 * k2)
        return rng.uniform(-bound, bound, size=(count, 1, k1, k2))
    raise ConfigurationError(f"unknown kernel_init {how!r}")


def init_pipeline_params(plan: CompressionPlan, rng: np.random.Generator,
                         opts: PipelineOptions = PipelineOptions()) -> dict[str, np.ndarray]:
    """Fresh per-layer pipeline parameters (shared by compression and dilation).

    The first 1x1 layer gets a random uniform init and the second starts at
    zero, so the residual branch is initially the identity yet still
    receives gradient.  Magnitudes start at the direction norms, making the
    effective kernel equal to the direction.
    """
    params = {}
    for cfg in plan.layers:
        n = cfg.layer_name
        params[f"{n}.pre1.weight"] = rng.uniform(-1.0, 1.0, size=(PRE_CHANNELS, 1, 1, 1))
        params[f"{n}.pre1.bias"] = rng.uniform(-1.0, 1.0, size=PRE_CHANNELS)
        params[f"{n}.pre2.weight"] = np.zeros((1, PRE_CHANNELS, 1, 1))
        params[f"{n}.pre2.bias"] = np.zeros(1)
        direction = _init_kernel(rng, cfg.slice_count, cfg.kernel, opts.kernel_init)
        params[f"{n}.direction"] = direction
        params[f"{n}.magnitude"] = np.linalg.norm(direction.reshape(cfg.slice_count, -1), axis=1)
        if cfg.has_bias:
            bdir = _init_kernel(rng, 1, cfg.bias_kernel, opts.kernel_init)
            params[f"{n}.bias_direction"] = bdir
            params[f"{n}.bias_magnitude"] = np.linalg.norm(bdir.reshape(1, -1), axis=1)
    return params


def identity_pipeline_params(plan: CompressionPlan) -> dict[str, np.ndarray]:
    """Parameters for which an SR=1 plan with ``s_p = s_n = 1`` reproduces its input exactly."""
    params = {}
    for cfg in plan.layers:
        if cfg.kernel != (1, 1):
            raise ConfigurationError("identity pipeline needs 1x1 kernels (SR = 1)")
        n = cfg.layer_name
        params[f"{n}.pre1.weight"] = np.zeros((PRE_CHANNELS, 1, 1, 1))
        params[f"{n}.pre1.bias"] = np.zeros(PRE_CHANNELS)
        params[f"{n}.pre2.weight"] = np.zeros((1, PRE_CHANNELS, 1, 1))
        params[f"{n}.pre2.bias"] = np.zeros(1)
        params[f"{n}.direction"] = np.ones((cfg.slice_count, 1, 1, 1))
        params[f"{n}.magnitude"] = np.ones(cfg.slice_count)
        if cfg.has_bias:
            params[f"{n}.bias_direction"] = np.ones((1, 1, 1, 1))
            params[f"{n}.bias_magnitude"] = np.ones(1)
    return params


def trainable_names(params: Mapping, opts: PipelineOptions) -> list[str]:
    names = []
    for name in params:
        if ".pre" in name and not opts.use_pre:
            continue
        if name.endswith("magnitude") and not opts.use_weight_norm:
            continue
        names.append(name)
    return names


def check_pipeline_params(plan: CompressionPlan, params: Mapping) -> None:
    for cfg in plan.layers:
        key = f"{cfg.layer_name}.direction"
        if key not in params:
            raise ConfigurationError(f"pipeline parameters lack {key}")
        shape = np.shape(params[key].data if isinstance(params[key], T.Tensor) else params[key])
        if tuple(shape) != (cfg.slice_count, 1, *cfg.kernel):
            raise ConfigurationError(f"{key}: shape {shape} does not match plan kernel {cfg.kernel}")
        if cfg.has_bias and f"{cfg.layer_name}.bias_direction" not in params:
            raise ConfigurationError(f"pipeline parameters lack {cfg.layer_name}.bias_direction")


def _kernel(params, prefix, opts):
    direction = T.as_tensor(params[f"{prefix}direction"])
    if opts.use_weight_norm:
        return T.weight_norm(direction, T.as_tensor(params[f"{prefix}magnitude"]))
    return direction


def _pre_residual(x: T.Tensor, params, name: str, transposed: bool) -> T.Tensor:
    op = T.transposed_conv2d if transposed else T.conv2d
    w1 = T.as_tensor(params[f"{name}.pre1.weight"])
    w2 = T.as_tensor(params[f"{name}.pre2.weight"])
    if transposed:
        # transposed 1x1 kernels are stored [in, out, 1, 1]
        w1 = T.transpose(w1, (1, 0, 2, 3))
        w2 = T.transpose(w2, (1, 0, 2, 3))
    h = op(x, w1)
    h = T.add(h, T.reshape(T.as_tensor(params[f"{name}.pre1.bias"]), (1, PRE_CHANNELS, 1, 1)))
    h = op(h, w2)
    h = T.add(h, T.reshape(T.as_tensor(params[f"{name}.pre2.bias"]), (1, 1, 1, 1)))
    return T.add(h, x)


def apply_layer(weight, bias, params: Mapping, cfg: CompressionLayerConfig, opts: PipelineOptions,
                transposed: bool = False):
    """Run one layer's weight (and bias) through the pipeline.

    ``transposed=False`` compresses a global layer, ``True`` dilates a
    sub-model layer back to the global shape.
    """
    name = cfg.layer_name
    x = reshape_for_compression(T.as_tensor(weight))
    if opts.use_pre:
        x = _pre_residual(x, params, name, transposed)
    s, _, o, i = x.shape
    x = T.reshape(x, (1, s, o, i))
    kernel = _kernel(params, f"{name}.", opts)
    if transposed:
        z = T.transposed_conv2d(x, kernel, cfg.stride, cfg.padding, groups=s)
    else:
        z = T.conv2d(x, kernel, cfg.stride, cfg.padding, groups=s)
    if opts.use_mlr:
        z = T.mlr(z, opts.s_p, opts.s_n)
    _, _, o2, i2 = z.shape
    w_out = restore_from_slices(T.reshape(z, (s, 1, o2, i2)), cfg.spatial)
    b_out = None
    if bias is not None:
        b = T.reshape(T.as_tensor(bias), (1, 1, -1, 1))
        bk = _kernel(params, f"{name}.bias_", opts)
        op = T.transposed_conv2d if transposed else T.conv2d
        bz = op(b, bk, cfg.stride, cfg.padding)
        b_out = T.reshape(bz, (bz.shape[2],))
    return w_out, b_out


def compress_model(global_params: Mapping, plan: CompressionPlan, cp: Mapping,
                   opts: PipelineOptions = PipelineOptions()) -> dict:
    """Sub-model parameters generated from the (frozen) global parameters.

    Values are Tensors when ``cp`` holds grad-enabled Tensors, otherwise arrays.
    """
    check_pipeline_params(plan, cp)
    out = {}
    for cfg in plan.layers:
        n = cfg.layer_name
        bias = global_params.get(f"{n}.bias") if cfg.has_bias else None
        w, b = apply_layer(global_params[f"{n}.weight"], bias, cp, cfg, opts)
        out[f"{n}.weight"] = w
        if b is not None:
            out[f"{n}.bias"] = b
    if not any(isinstance(v, T.Tensor) and v.requires_grad for v in cp.values()):
        out = {k: v.data for k, v in out.items()}
    return out


def schedule_fn(schedule: Schedule, opts: PipelineOptions):
    if opts.use_scheduler:
        return lambda e: cosine_lr(e, schedule.t_max, schedule.lr_min, schedule.lr_max)
    return lambda e: schedule.lr_max


def finetune_compression(global_params: Mapping, plan: CompressionPlan, cp: Mapping, data: Dataset,
                         epochs: int, opts: PipelineOptions = PipelineOptions(),
                         schedule: Schedule = Schedule(), seed: int = 0, batch_size: int = 32,
                         optimizer: str = "sgd") -> dict:
    """Train the compression parameters so the generated sub-model fits ``data``.

    The global model is never updated.  Epochs are numbered from 1 for the
    learning-rate schedule.
    """
    if len(data) == 0:
        raise UsageError("server data is empty")
    validate_params(plan.global_spec, global_params)
    check_pipeline_params(plan, cp)
    frozen = {k: np.array(v, copy=True) for k, v in global_params.items()}
    sub_spec = plan.sub_spec

    def loss_fn(p, xb, yb):
        sub = compress_model(frozen, plan, p, opts)
        return T.cross_entropy(forward(sub_spec, sub, xb), yb)

    return fit(cp, trainable_names(cp, opts), loss_fn, data, epochs, schedule_fn(schedule, opts), seed,
               batch_size, optimizer)
