"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor`; values are never mutated
after construction.  A tensor created from other tensors remembers its
parents together with a closure mapping the upstream gradient to one
gradient per parent.  :func:`grad` walks that graph in reverse
topological order.

Only the operations needed by the model, compression, dilation and
aggregation pipelines are provided.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError, NumericalError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "grad")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise InputError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> dict[int, np.ndarray]:
        """Populate ``.grad`` on every reachable leaf that requires grad."""
        grads = _backprop(self)
        for node, g in grads.values():
            if node.is_leaf and node.requires_grad:
                node.grad = g
        return {k: g for k, (_, g) in grads.items()}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(loss: Tensor) -> dict[int, tuple[Tensor, np.ndarray]]:
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(_toposort(loss)):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        out[id(node)] = (node, g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in acc:
                acc[key] = acc[key] + pg
            else:
                acc[key] = pg
    return out


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to named leaf tensors.

    Tensors with ``requires_grad=False`` are left out of the result.
    Trainable tensors that do not influence the loss get a zero gradient.
    """
    grads = _backprop(loss)
    result = {}
    for name, t in params.items():
        if not t.requires_grad:
            continue
        entry = grads.get(id(t))
        result[name] = entry[1] if entry is not None else np.zeros_like(t.data)
    return result


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def mlr(x: Tensor, s_p: float = 0.85, s_n: float = 0.001) -> Tensor:
    """Two-slope leaky activation: ``s_p*x`` for x >= 0, ``s_n*x`` otherwise.

    The derivative at exactly 0 is taken from the positive branch.
    """
    slope = np.where(x.data >= 0, s_p, s_n)
    return _make(x.data * slope, (x,), lambda g: (g * slope,))


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(x.shape, float(g) / n),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Frobenius inner product of two equally shaped tensors."""
    return sum(mul(a, b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def stack(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return _make(np.stack([x.data for x in xs]), tuple(xs),
                 lambda g: tuple(g[i] for i in range(len(xs))))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_stride_padding(stride: int, padding: int):
    if int(stride) != stride or stride < 1:
        raise ConfigurationError(f"stride must be a positive int, got {stride}")
    if int(padding) != padding or padding < 0:
        raise ConfigurationError(f"padding must be a non-negative int, got {padding}")


def _conv_raw(x: np.ndarray, k: np.ndarray, stride: int, padding: int, groups: int) -> np.ndarray:
    n, c, _, _ = x.shape
    o, cg, k1, k2 = k.shape
    if k1 == k2 == 1 and stride == 1 and not padding and groups == 1:
        return np.einsum("nchw,oc->nohw", x, k[:, :, 0, 0])
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k1, k2), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    if groups == 1:
        out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, o
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    og = o // groups
    win = win.reshape(n, groups, cg, ho, wo, k1, k2)
    kg = k.reshape(groups, og, cg, k1, k2)
    out = np.einsum("ngchwij,gocij->ngohw", win, kg, optimize=True)
    return out.reshape(n, o, ho, wo)


def _conv_kernel_grad(x: np.ndarray, gy: np.ndarray, kshape, stride: int, padding: int,
                      groups: int) -> np.ndarray:
    n, c, _, _ = x.shape
    o, cg, k1, k2 = kshape
    if k1 == k2 == 1 and stride == 1 and not padding and groups == 1:
        return np.einsum("nohw,nchw->oc", gy, x)[:, :, None, None]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k1, k2), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = gy.shape[2], gy.shape[3]
    win = win[:, :, :ho, :wo]
    if groups == 1:
        return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))
    og = o // groups
    win = win.reshape(n, groups, cg, ho, wo, k1, k2)
    gyg = gy.reshape(n, groups, og, ho, wo)
    out = np.einsum("ngohw,ngchwij->gocij", gyg, win, optimize=True)
    return out.reshape(kshape)


def _conv_transpose_raw(y: np.ndarray, k: np.ndarray, stride: int, padding: int, groups: int,
                        out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Adjoint of :func:`_conv_raw` with respect to its input."""
    n, o, ho, wo = y.shape
    _, cg, k1, k2 = k.shape
    if k1 == k2 == 1 and stride == 1 and not padding and groups == 1 and out_hw in (None, (ho, wo)):
        return np.einsum("nohw,oc->nchw", y, k[:, :, 0, 0])
    if stride > 1:
        yd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
        yd[:, :, ::stride, ::stride] = y
    else:
        yd = y
    yd = np.pad(yd, ((0, 0), (0, 0), (k1 - 1, k1 - 1), (k2 - 1, k2 - 1)))
    og = o // groups
    kf = k.reshape(groups, og, cg, k1, k2)[..., ::-1, ::-1]
    kf = np.ascontiguousarray(kf.transpose(0, 2, 1, 3, 4)).reshape(groups * cg, og, k1, k2)
    full = _conv_raw(yd, kf, 1, 0, groups)
    full_h, full_w = full.shape[2], full.shape[3]
    h = full_h - 2 * padding if out_hw is None else out_hw[0]
    w = full_w - 2 * padding if out_hw is None else out_hw[1]
    if h < 1 or w < 1:
        raise ConfigurationError(f"transposed convolution output size ({h}, {w}) is not positive")
    out = full[:, :, padding:padding + h, padding:padding + w]
    if out.shape[2] < h or out.shape[3] < w:
        out = np.pad(out, ((0, 0), (0, 0), (0, h - out.shape[2]), (0, w - out.shape[3])))
    return np.ascontiguousarray(out)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of ``x`` [N, C_in, H, W] with ``kernel`` [C_out, C_in/groups, k1, k2]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_stride_padding(stride, padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigurationError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    o, cg, k1, k2 = kernel.shape
    if c % groups or o % groups or c // groups != cg:
        raise ConfigurationError(
            f"channel mismatch: input has {c} channels, kernel expects {cg} x {groups} groups")
    if h + 2 * padding < k1 or w + 2 * padding < k2:
        raise ConfigurationError(f"kernel {(k1, k2)} larger than padded input {(h, w)}")
    xd, kd = x.data, kernel.data
    out = _conv_raw(xd, kd, stride, padding, groups)

    def backward(g):
        gx = _conv_transpose_raw(g, kd, stride, padding, groups, (h, w)) if x.requires_grad else None
        gk = _conv_kernel_grad(xd, g, kd.shape, stride, padding, groups) if kernel.requires_grad else None
        return gx, gk

    return _make(out, (x, kernel), backward)


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
                      groups: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``kernel`` has the same layout as the conv2d kernel whose adjoint is
    taken, i.e. [C_in_of_this_op, C_out_of_this_op / groups, k1, k2].  The
    output spatial size is ``(H - 1) * stride - 2 * padding + k``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_stride_padding(stride, padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigurationError("transposed_conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    o, cg, k1, k2 = kernel.shape
    if c != o or c % groups:
        raise ConfigurationError(f"channel mismatch: input has {c} channels, kernel expects {o}")
    oh = (h - 1) * stride - 2 * padding + k1
    ow = (w - 1) * stride - 2 * padding + k2
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"transposed convolution output size ({oh}, {ow}) is not positive")
    xd, kd = x.data, kernel.data
    out = _conv_transpose_raw(xd, kd, stride, padding, groups, (oh, ow))

    def backward(g):
        gx = _conv_raw(g, kd, stride, padding, groups) if x.requires_grad else None
        gk = _conv_kernel_grad(g, xd, kd.shape, stride, padding, groups) if kernel.requires_grad else None
        return gx, gk

    return _make(out, (x, kernel), backward)


def maxpool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"pool size {size} larger than input {(h, w)}")
    xc = x.data[:, :, :ho * size, :wo * size]
    blocks = xc.reshape(n, c, ho, size, wo, size)
    # first maximum in each window receives the gradient
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros((n, c, h, w))
        gx[:, :, :ho * size, :wo * size] = gb.reshape(n, c, ho * size, wo * size)
        return (gx,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# reparameterization and losses
# ---------------------------------------------------------------------------

def weight_norm(direction: Tensor, magnitude: Tensor) -> Tensor:
    """``magnitude[o] * direction[o] / ||direction[o]||`` along the leading axis."""
    direction, magnitude = as_tensor(direction), as_tensor(magnitude)
    v = direction.data
    o = v.shape[0]
    if magnitude.data.size != o:
        raise ConfigurationError(f"need {o} magnitudes, got {magnitude.data.size}")
    flat = v.reshape(o, -1)
    norms = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    if not np.all(norms > 0):
        raise NumericalError("weight_norm direction has a zero-norm slice")
    gm = magnitude.data.reshape(o)
    unit = flat / norms[:, None]
    out = (gm[:, None] * unit).reshape(v.shape)
    mshape = magnitude.shape

    def backward(g):
        gf = g.reshape(o, -1)
        proj = np.einsum("ij,ij->i", gf, unit)
        gdir = (gm / norms)[:, None] * (gf - proj[:, None] * unit)
        return gdir.reshape(v.shape), proj.reshape(mshape)

    return _make(out, (direction, magnitude), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax likelihood of integer ``labels``."""
    labels = np.asarray(labels)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise InputError(f"logits {z.shape} and labels {labels.shape} disagree")
    k = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.intp)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    n = z.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# optimizers over named parameter dicts
# ---------------------------------------------------------------------------

def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
             trainable: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Return ``p - lr * g`` for every trainable entry; other entries are copied through."""
    names = list(params) if trainable is None else list(trainable)
    missing = [n for n in names if n not in grads]
    if missing:
        raise UsageError(f"no gradient for trainable parameters {missing}")
    out = dict(params)
    for n in names:
        g = np.asarray(grads[n])
        if g.shape != np.shape(params[n]):
            raise UsageError(f"gradient shape {g.shape} does not match parameter {n}")
        out[n] = params[n] - lr * g
    return out


class Adam:
    """Adam moments kept per parameter name; :meth:`step` returns new arrays."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, lr, trainable=None):
        names = list(params) if trainable is None else list(trainable)
        missing = [n for n in names if n not in grads]
        if missing:
            raise UsageError(f"no gradient for trainable parameters {missing}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        out = dict(params)
        for n in names:
            g = grads[n]
            m = self.m.get(n)
            v = self.v.get(n)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[n], self.v[n] = m, v
            out[n] = params[n] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


class SGD:
    """Stateless counterpart of :class:`Adam` so trainers can swap optimizers."""

    def step(self, params, grads, lr, trainable=None):
        return sgd_step(params, grads, lr, trainable)


def make_optimizer(name: str):
    if name == "adam":
        return Adam()
    if name == "sgd":
        return SGD()
    raise ConfigurationError(f"unknown optimizer {name!r}")
