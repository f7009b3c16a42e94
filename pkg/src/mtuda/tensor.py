"""Dense fp64 tensors with reverse-mode automatic differentiation.

Layout is NCHW throughout. Every op is a :class:`Function` subclass whose
``forward`` works on raw numpy arrays and whose ``backward`` maps the output
gradient to one gradient (or ``None``) per input. Calling
:meth:`Tensor.backward` walks the recorded graph once in reverse topological
order and *accumulates* into ``.grad`` of every leaf with ``requires_grad``;
callers zero gradients themselves.

Bilinear upsampling uses the ``align_corners=False`` convention: output pixel
``o`` samples the input at ``(o + 0.5) * in / out - 0.5``, clamped to the
valid range.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mtuda import kernels
from mtuda.errors import ContractError, DimensionError

LOG_FLOOR = 1e-12
IGNORE = 255


class Function:
    """One differentiable op. Instances double as graph nodes."""

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> "Tensor":
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{cls.__name__} produced non-finite values")
        requires_grad = any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _node=fn if requires_grad else None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _node: Function | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node = _node
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return Mul.apply(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return Mul.apply(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# --------------------------------------------------------------------------
# graph traversal


@dataclass(frozen=True)
class GraphNode:
    op: str
    input_ids: tuple
    output_id: int


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in reversed(t._node.inputs):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def graph_of(loss: Tensor) -> list[GraphNode]:
    """The executed ops behind ``loss`` in topological order (inputs first)."""
    return [
        GraphNode(type(t._node).__name__, tuple(id(p) for p in t._node.inputs), id(t))
        for t in _toposort(loss)
        if t._node is not None
    ]


def leaves_of(loss: Tensor) -> list[Tensor]:
    """Trainable leaves that ``loss`` can send gradient to."""
    return [t for t in _toposort(loss) if t._node is None and t.requires_grad]


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_toposort(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, gp in zip(t._node.inputs, t._node.backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp


# --------------------------------------------------------------------------
# elementwise


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        a, b = self.a, self.b
        ga = _unbroadcast(g * b, a.shape) if self.inputs[0].requires_grad else None
        gb = _unbroadcast(g * a, b.shape) if self.inputs[1].requires_grad else None
        return ga, gb


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Log(Function):
    """Natural log with inputs floored at ``floor`` (zero gradient below it)."""

    def forward(self, x, floor=LOG_FLOOR):
        self.x, self.floor = x, floor
        return np.log(np.maximum(x, floor))

    def backward(self, g):
        x = self.x
        return (np.where(x > self.floor, g / np.maximum(x, self.floor), 0.0),)


class Exp(Function):
    def forward(self, x):
        self.y = np.exp(x)
        return self.y

    def backward(self, g):
        return (g * self.y,)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Softplus(Function):
    def forward(self, x):
        self.x = x
        return np.logaddexp(0.0, x)

    def backward(self, g):
        return (g * _sigmoid(self.x),)


class LeakyReLU(Function):
    def forward(self, x, slope=0.2):
        if not 0.0 <= slope < 1.0:
            raise ValueError(f"slope must lie in [0, 1), got {slope}")
        self.scale = np.where(x > 0, 1.0, slope)
        return x * self.scale

    def backward(self, g):
        return (g * self.scale,)


class NegXLogX(Function):
    """Entry-wise ``-p log p`` with ``0 log 0 = 0``."""

    def forward(self, p):
        self.logp = np.log(np.maximum(p, LOG_FLOOR))
        return -p * self.logp

    def backward(self, g):
        return (-g * (self.logp + 1.0),)


# --------------------------------------------------------------------------
# structural


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.bounds = np.cumsum([0] + [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(self.bounds[:-1], self.bounds[1:]):
            idx[self.axis] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(out)


class PickChannel(Function):
    """``out[n,h,w] = x[n, labels[n,h,w], h, w]``; IGNORE pixels yield ``fill``."""

    def forward(self, x, labels=None, fill=1.0):
        labels = np.asarray(labels)
        self.valid = labels != IGNORE
        self.idx = np.where(self.valid, labels, 0).astype(np.intp)
        self.shape = x.shape
        picked = np.take_along_axis(x, self.idx[:, None], axis=1)[:, 0]
        return np.where(self.valid, picked, fill)

    def backward(self, g):
        gx = np.zeros(self.shape)
        np.put_along_axis(gx, self.idx[:, None], np.where(self.valid, g, 0.0)[:, None], axis=1)
        return (gx,)


class SoftmaxChannel(Function):
    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=1, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


# --------------------------------------------------------------------------
# convolution and resampling


class Conv2d(Function):
    def forward(self, x, w, b, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
        n, cin, h, wd = x.shape
        cout, cin_w, kh, kw = w.shape
        if cin != cin_w:
            raise DimensionError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
        if b.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
        if stride < 1 or padding < 0:
            raise ValueError("conv2d: stride >= 1 and padding >= 0 required")
        ho, wo = kernels.out_size(h, kh, stride, padding), kernels.out_size(wd, kw, stride, padding)
        if ho < 1 or wo < 1:
            raise DimensionError(f"conv2d: input {h}x{wd} too small for kernel {kh}x{kw}")
        self.geom = (x.shape, kh, kw, stride, padding)
        self.cols = kernels.im2col(x, kh, kw, stride, padding)
        self.wmat = w.reshape(cout, -1)
        y = self.cols @ self.wmat.T + b
        return np.ascontiguousarray(y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(self, g):
        x_in, w_in, b_in = self.inputs
        x_shape, kh, kw, stride, padding = self.geom
        cout = self.wmat.shape[0]
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gx = gw = gb = None
        if x_in.requires_grad:
            gx = kernels.col2im(gmat @ self.wmat, x_shape, kh, kw, stride, padding)
        if w_in.requires_grad:
            gw = (gmat.T @ self.cols).reshape(w_in.shape)
        if b_in.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``o`` holds the linear-interpolation weights of output ``o`` (align_corners=False)."""
    a = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(a, (rows, lo), 1.0 - frac)
    np.add.at(a, (rows, hi), frac)
    return a


_INTERP_CACHE: dict = {}


def _cached_interp(n_in, n_out):
    key = (n_in, n_out)
    if key not in _INTERP_CACHE:
        _INTERP_CACHE[key] = interp_matrix(n_in, n_out)
    return _INTERP_CACHE[key]


class BilinearUpsample(Function):
    def forward(self, x, out_h=None, out_w=None):
        n, c, h, w = x.shape
        if out_h < h or out_w < w:
            raise DimensionError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
        self.ah, self.aw = _cached_interp(h, out_h), _cached_interp(w, out_w)
        return np.ascontiguousarray(np.matmul(np.matmul(self.ah, x), self.aw.T))

    def backward(self, g):
        return (np.ascontiguousarray(np.matmul(np.matmul(self.ah.T, g), self.aw)),)


# --------------------------------------------------------------------------
# functional API


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


def bilinear_upsample(x, out_h: int, out_w: int) -> Tensor:
    return BilinearUpsample.apply(x, out_h=out_h, out_w=out_w)


def softmax_channel(x) -> Tensor:
    return SoftmaxChannel.apply(x)


def log(x, floor: float = LOG_FLOOR) -> Tensor:
    return Log.apply(x, floor=floor)


def exp(x) -> Tensor:
    return Exp.apply(x)


def softplus(x) -> Tensor:
    return Softplus.apply(x)


def neg_xlogx(p) -> Tensor:
    return NegXLogX.apply(p)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 1:
        return as_tensor(tensors[0])
    return Concat.apply(*tensors, axis=axis)


def pick_channel(x, labels, fill: float = 1.0) -> Tensor:
    return PickChannel.apply(x, labels=labels, fill=fill)
