"""Minimal reverse-mode differentiable tensor core on top of numpy.

Every primitive returns a new :class:`Tensor` whose ``_backward`` closure maps
the upstream gradient to one gradient per parent. Nodes carry a global
sequence number, so :func:`backward` can replay the computation record in
exact reverse execution order and visit each op once.

Values are stored as float64 throughout.

Broadcasting
------------
Binary elementwise ops (``add``, ``sub``, ``mul``) follow numpy broadcasting:
shapes are aligned on their trailing axes and an extent of 1 (or a missing
leading axis) stretches to match the other operand. The backward pass sums
the upstream gradient over every stretched axis, so each operand receives a
gradient of its own shape. Anything numpy refuses to broadcast raises
:class:`~attxnet.errors.ConfigurationError`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericalError

_seq = itertools.count()
_state = {"grad": True, "debug": False}


@contextlib.contextmanager
def no_grad():
    """Disable recording; ops inside return constants."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    _state["debug"] = bool(flag)


def is_debug() -> bool:
    return _state["debug"]


class Tensor:
    """Dense float64 array that can participate in a computation record.

    Parameters
    ----------
    values : array_like
        Copied into a new float64 array. Non-finite entries are rejected.
    requires_grad : bool
        Leaf tensors with this flag receive ``.grad`` after :func:`backward`.
    name : str, optional
        Used in diagnostics (e.g. NaN aborts name the offending parameter).
    """

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        data = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NumericalError(f"non-finite values in tensor {name or ''}".strip())
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._seq = next(_seq)

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out._seq = next(_seq)
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        if _state["debug"] and not np.all(np.isfinite(data)):
            raise NumericalError(f"non-finite output produced by {op}")
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t.name = self.name
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        t._seq = next(_seq)
        return t

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, name=None) -> Tensor:
    """Uniform init in ``±sqrt(6 / (fan_in + fan_out))``."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)


# --------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add across multiple uses of the same tensor and across repeated
    calls; call :func:`zero_grad` (or ``Tensor.zero_grad``) to reset.
    """
    if loss.data.size != 1:
        raise ConfigurationError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------
# elementwise


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


elementwise_mul = mul


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    """``a ** p`` for a constant exponent. ``p == 0`` gives constant ones."""
    p = float(p)
    if p == 0.0:
        return Tensor._result(np.ones_like(a.data), (a,), lambda g: (None,), "pow")
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._result(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    """``max(0, x)``; the subgradient at 0 is 0."""
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._result(np.where(mask, a.data, 0.0), (a,), bw, "relu")


# --------------------------------------------------------------------------
# reductions and shape ops


def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tensor_sum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the first (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return Tensor._result(np.array(out), (a,), bw, "getitem")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather ``indices`` along ``axis``; repeated indices add in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._result(np.take(a.data, idx, axis=axis), (a,), bw, "take")


def pick(a: Tensor, index) -> Tensor:
    """Row-wise gather: ``out[b] = a[b, index[b]]`` for a 2-D tensor."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return Tensor._result(a.data[rows, index], (a,), bw, "pick")


def concat(inputs: Sequence[Tensor], axis: int) -> Tensor:
    """Join tensors along ``axis``; backward hands each input its own slice."""
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ConfigurationError("concat needs at least one input")
    nd = inputs[0].ndim
    ax = axis % nd
    ref = inputs[0].shape
    for t in inputs:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            shapes = ", ".join(str(x.shape) for x in inputs)
            raise ConfigurationError(f"concat along axis {axis}: incompatible shapes {shapes}")
    if len(inputs) == 1:
        return inputs[0]
    bounds = np.cumsum([t.shape[ax] for t in inputs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in inputs], axis=ax), tuple(inputs), bw, "concat")


def stack(inputs: Sequence[Tensor], axis: int) -> Tensor:
    inputs = [as_tensor(t) for t in inputs]
    shapes = {t.shape for t in inputs}
    if len(shapes) != 1:
        raise ConfigurationError(f"stack: shapes differ {[t.shape for t in inputs]}")
    out = np.stack([t.data for t in inputs], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(inputs)))

    return Tensor._result(out, tuple(inputs), bw, "stack")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """Contract the last axis of ``a`` with the first axis of 2-D ``w``."""
    a, w = as_tensor(a), as_tensor(w)
    if w.ndim != 2 or a.shape[-1] != w.shape[0]:
        raise ConfigurationError(f"matmul: cannot contract {a.shape} with {w.shape}")
    out = a.data @ w.data

    def bw(g):
        ga = g @ w.data.T
        gw = a.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return ga, gw

    return Tensor._result(out, (a, w), bw, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape (B, F_in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(f"dense: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ConfigurationError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def bw(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor._result(out, (x, weight, bias), bw, "dense")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ConfigurationError(f"softmax: axis {axis} invalid for shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._result(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), bw, "log_softmax")


# --------------------------------------------------------------------------
# 1-D convolution, pooling, normalization


def _pad_pair(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        left, right = int(padding[0]), int(padding[1])
    else:
        left = right = int(padding)
    if left < 0 or right < 0:
        raise ConfigurationError(f"padding must be non-negative, got {padding}")
    return left, right


def conv_output_length(length: int, kernel: int, stride: int = 1, padding=0) -> int:
    """``floor((L + pad_total - K) / stride) + 1``; may be < 1 on underflow."""
    left, right = _pad_pair(padding)
    span = length + left + right - kernel
    if span < 0:
        return 0
    return span // stride + 1


def pool_output_length(length: int, window: int, stride: int) -> int:
    if window > length:
        return 0
    return (length - window) // stride + 1


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation of (B, C_in, L) or (C_in, L) input with (C_out, C_in, K).

    ``padding`` is either a symmetric zero-pad width or a ``(left, right)``
    pair. Output length follows :func:`conv_output_length`.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ConfigurationError(f"conv1d: expected 3-D input/kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ConfigurationError(f"conv1d: stride must be >= 1, got {stride}")
    B, C, L = x.shape
    Co, Ci, K = kernel.shape
    if C != Ci:
        raise ConfigurationError(
            f"conv1d: input channels of input {x.shape} do not match kernel {kernel.shape}"
        )
    if bias.shape != (Co,):
        raise ConfigurationError(f"conv1d: bias {bias.shape} does not match kernel {kernel.shape}")
    left, right = _pad_pair(padding)
    Lout = conv_output_length(L, K, stride, (left, right))
    if Lout < 1:
        raise ConfigurationError(
            f"conv1d: kernel {K} longer than padded input length {L + left + right}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    Lp = xp.shape[2]
    wm = kernel.data.reshape(Co, C * K)

    def windows():
        return sliding_window_view(xp, K, axis=2)[:, :, : stride * (Lout - 1) + 1 : stride, :]

    cols = windows().transpose(0, 1, 3, 2).reshape(B, C * K, Lout)
    out = wm @ cols + bias.data[:, None]
    del cols

    def bw(g):
        cols = windows().transpose(0, 2, 1, 3).reshape(B * Lout, C * K)
        gw = (g.transpose(0, 2, 1).reshape(B * Lout, Co).T @ cols).reshape(Co, C, K)
        gb = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            # scatter the column gradients back, one stride phase at a time so
            # every accumulation hits contiguous memory
            gcols = (kernel.data.transpose(2, 1, 0).reshape(K * C, Co) @ g).reshape(B, K, C, Lout)
            phase_len = -(-Lp // stride) + K // stride + 1
            phases = np.zeros((stride, B, C, phase_len))
            for k in range(K):
                q, r = divmod(k, stride)
                phases[r, :, :, q : q + Lout] += gcols[:, k]
            gxp = np.empty_like(xp)
            for r in range(stride):
                n = len(range(r, Lp, stride))
                gxp[:, :, r::stride] = phases[r, :, :, :n]
            gx = gxp[:, :, left : left + L]
        return gx, gw, gb

    result = Tensor._result(out, (x, kernel, bias), bw, "conv1d")
    if squeeze:
        result = reshape(result, result.shape[1:])
    return result


def maxpool1d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over sliding windows of the last axis; ties route to the first max."""
    L = x.shape[-1]
    if window > L:
        raise ConfigurationError(f"maxpool1d: window {window} exceeds input length {L}")
    if window < 1 or stride < 1:
        raise ConfigurationError("maxpool1d: window and stride must be >= 1")
    Lout = pool_output_length(L, window, stride)
    win = sliding_window_view(x.data, window, axis=-1)[..., : stride * (Lout - 1) + 1 : stride, :]
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    pos = arg + np.arange(Lout) * stride

    def bw(g):
        full = np.zeros((int(np.prod(x.shape[:-1], dtype=int)), L))
        rows = np.arange(full.shape[0])[:, None]
        p2 = pos.reshape(full.shape[0], Lout)
        g2 = g.reshape(full.shape[0], Lout)
        if window <= stride:
            full[rows, p2] = g2
        else:
            np.add.at(full, (rows, p2), g2)
        return (full.reshape(x.shape),)

    return Tensor._result(np.ascontiguousarray(out), (x,), bw, "maxpool1d")


class RunningStats:
    """Running per-channel mean/variance owned by one batchnorm layer."""

    def __init__(self):
        self.mean: np.ndarray | None = None
        self.var: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.mean is not None


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of (B, C, L) input over the (B, L) axes.

    In ``train`` mode batch statistics are used and ``stats`` is updated as
    ``running = momentum * running + (1 - momentum) * batch``; the first
    training call seeds the running values with the batch statistics.
    ``eval`` mode normalizes with the running values.
    """
    if eps <= 0:
        raise ConfigurationError("batchnorm1d: eps must be positive")
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ConfigurationError(
            f"batchnorm1d: input {x.shape} incompatible with gamma {gamma.shape} / beta {beta.shape}"
        )
    g_ = gamma.data[None, :, None]
    if mode == "train":
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        if stats.mean is None:
            stats.mean, stats.var = mu.copy(), var.copy()
        else:
            stats.mean = momentum * stats.mean + (1.0 - momentum) * mu
            stats.var = momentum * stats.var + (1.0 - momentum) * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
        n = x.shape[0] * x.shape[2]

        def bw(g):
            dxhat = g * g_
            s1 = dxhat.sum(axis=(0, 2), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            gx = inv[None, :, None] / n * (n * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    elif mode == "eval":
        if not stats.initialized:
            raise ConfigurationError("batchnorm1d: running statistics uninitialized")
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean[None, :, None]) * inv[None, :, None]

        def bw(g):
            return g * g_ * inv[None, :, None], (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    else:
        raise ConfigurationError(f"batchnorm1d: mode must be 'train' or 'eval', got {mode!r}")
    out = g_ * xhat + beta.data[None, :, None]
    return Tensor._result(out, (x, gamma, beta), bw, "batchnorm1d")


# --------------------------------------------------------------------------
# finite differences


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    floor: float = 1e-8,
) -> float:
    """Compare analytic and central-difference gradients of scalar ``fn(*inputs)``.

    Returns the worst elementwise ``|analytic - numeric| / max(floor, |numeric|)``
    and raises ``AssertionError`` when it exceeds ``rtol``.
    """
    for t in inputs:
        t.grad = None
    backward(fn(*inputs))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for t, an in zip(inputs, analytic):
            if not t.requires_grad:
                continue
            num = numerical_gradient(lambda: float(fn(*inputs).data), t.data, h)
            err = np.abs(an - num) / np.maximum(floor, np.abs(num))
            worst = max(worst, float(err.max(initial=0.0)))
    if worst >= rtol:
        raise AssertionError(f"gradient mismatch: worst relative error {worst:.3e} >= {rtol}")
    return worst
