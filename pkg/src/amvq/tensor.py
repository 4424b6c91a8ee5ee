"""Dense tensors with tape-free reverse-mode autodiff.

Every differentiable op builds its output through :func:`_result`, which
attaches the parents and a closure mapping the output gradient to one
gradient per parent. :func:`backward` topologically sorts the recorded
graph and walks it once; afterwards the interior nodes are released, so a
graph can be consumed a single time per forward pass.

Arrays are float32 unless a float64 array is passed in, in which case the
whole computation stays in float64 (the gradient checker relies on this).
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GraphNode",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "conv2d_output_size",
    "upsample_nearest",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "log",
    "softplus",
    "clip",
    "batch_norm",
    "sum",
    "mean",
    "square_sum",
    "sqdist",
    "reshape",
    "transpose",
    "index_select",
    "stop_gradient",
    "straight_through",
    "backward",
    "graph",
    "no_grad",
    "gradient_check",
    "save_tensor",
    "load_tensor",
    "write_tensor",
    "read_tensor",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    return arr


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._needs: tuple[bool, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        # frozen-ness is fixed when the edge is recorded, not at backward time
        out._needs = tuple(p.requires_grad for p in parents)
        out._backward = grad_fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _result(out, (a, b), "div",
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _t(a)
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), "relu", lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _t(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _result(a.data * scale, (a,), "leaky_relu", lambda g: (g * scale,))


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return _result(out, (a,), "tanh", lambda g: (g * (1 - out * out),))


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1 - out),))


def log(a) -> Tensor:
    a = _t(a)
    return _result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = _t(a)
    out = np.logaddexp(0, a.data).astype(a.dtype)
    sig = 0.5 * (1 + np.tanh(0.5 * a.data))
    return _result(out, (a,), "softplus", lambda g: (g * sig,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _t(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(out, (a,), "sum", grad_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _result(out, (a,), "mean", grad_fn)


def square_sum(a) -> Tensor:
    """Squared L2 norm of all elements."""
    a = _t(a)
    out = np.asarray(np.sum(np.square(a.data, dtype=np.float64)), dtype=a.dtype)
    return _result(out, (a,), "square_sum", lambda g: (2 * g * a.data,))


def sqdist(a, b) -> Tensor:
    """Squared L2 distance ``||a - b||^2`` summed over all elements."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"sqdist: shapes {a.shape} and {b.shape} differ")
    return square_sum(sub(a, b))


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = _t(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _result(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _t(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose",
                   lambda g: (g.transpose(inv),))


def index_select(a, indices) -> Tensor:
    """Rows ``a[indices]``; gradients scatter-add back onto the selected rows."""
    a = _t(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"index_select: indices out of range for {a.shape[0]} rows")

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), "index_select", grad_fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _result(a.data @ b.data, (a, b), "matmul",
                   lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    """floor((size + 2*padding - kernel) / stride) + 1"""
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIkk weight.

    Output spatial size per axis is
    ``floor((in + 2*padding - kernel) / stride) + 1``.
    """
    x, weight = _t(x), _t(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight {weight.shape} expects {ci}")
    ho = conv2d_output_size(h, kh, stride, padding)
    wo = conv2d_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {kh}x{kw} "
                         f"with stride {stride}, padding {padding}")
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), parents, "conv2d", grad_fn)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = _t(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _result(out, (x,), "upsample_nearest",
                   lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def batch_norm(x, gamma, beta, running_mean: Tensor, running_var: Tensor,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W) of an NCHW tensor.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (population variance, the same statistic
    used to normalize, with ``momentum`` weight on the new value). In eval mode the running buffers are used, which makes
    the op a fixed affine map.
    """
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    shape = (1, -1, 1, 1)
    if not training:
        scale = (gamma.data / np.sqrt(running_var.data + eps)).astype(x.dtype)
        shift = beta.data - running_mean.data * scale
        out = x.data * scale.reshape(shape) + shift.reshape(shape)
        xhat = (x.data - running_mean.data.reshape(shape)) / np.sqrt(running_var.data.reshape(shape) + eps)

        def eval_grad(g):
            return (g * scale.reshape(shape),
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

        return _result(out.astype(x.dtype), (x, gamma, beta), "batch_norm", eval_grad)

    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes, dtype=np.float64)
    var = x.data.var(axis=axes, dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype).reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    running_mean.data = ((1 - momentum) * running_mean.data + momentum * mu).astype(running_mean.dtype)
    running_var.data = ((1 - momentum) * running_var.data + momentum * var).astype(running_var.dtype)

    def train_grad(g):
        dxhat = g * gamma.data.reshape(shape)
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        gx = inv_std.reshape(shape) / count * (count * dxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, gamma, beta), "batch_norm", train_grad)


# ---------------------------------------------------------------- gradient control


def stop_gradient(a) -> Tensor:
    """Identity in the forward pass, zero gradient to ``a``."""
    a = _t(a)
    replay = getattr(_state, "sg_replay", None)
    if replay is not None:
        if replay.recording:
            replay.values.append(a.data.copy())
        else:
            data = replay.values[replay.cursor]
            replay.cursor += 1
            return Tensor(data.astype(a.dtype))
    return Tensor(a.data)


def straight_through(f, quantized) -> Tensor:
    """Forward value of ``quantized``; backward copies the gradient to ``f``.

    Equivalent to ``f + stop_gradient(quantized - f)`` but returns the
    quantized values exactly instead of up to rounding.
    """
    f = _t(f)
    q = quantized.data if isinstance(quantized, Tensor) else np.asarray(quantized)
    if q.shape != f.shape:
        raise ShapeError(f"straight_through: shapes {f.shape} and {q.shape} differ")
    replay = getattr(_state, "sg_replay", None)
    if replay is not None:
        # gradient checks treat the estimator as f + sg(q - f)
        if replay.recording:
            replay.values.append(q.astype(np.float64) - f.data)
        else:
            offset = replay.values[replay.cursor]
            replay.cursor += 1
            return Tensor((f.data + offset).astype(f.dtype))
    return _result(q.astype(f.dtype, copy=True), (f,), "straight_through", lambda g: (g,))


# ---------------------------------------------------------------- backward


@dataclass(frozen=True)
class GraphNode:
    op: str
    inputs: tuple[int, ...]
    output: int


def _topo(root: Tensor) -> list[Tensor]:
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
        for p, need in zip(node._parents, node._needs):
            if need and id(p) not in seen:
                stack.append((p, False))
    return order


def graph(root: Tensor) -> list[GraphNode]:
    """Recorded ops reachable from ``root`` in topological order.

    ``inputs`` lists only gradient-tracking parents; constants are not nodes.
    """
    nodes = _topo(root)
    return [GraphNode(n._op, tuple(id(p) for p, need in zip(n._parents, n._needs) if need), id(n))
            for n in nodes if n._backward is not None]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that requires it."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward: graph already consumed; run the forward pass again")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node._consumed:
                raise RuntimeError("backward: graph already consumed; run the forward pass again")
            if g is not None:
                g = g.astype(node.dtype, copy=False).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, need, pg in zip(node._parents, node._needs, node._backward(g)):
                if pg is None or not need:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()
        node._needs = ()
        node._consumed = True


# ---------------------------------------------------------------- gradient check


class _Replay:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.recording = True
        self.cursor = 0


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray,
                   eps: float = 1e-3, sg_aware: bool = True) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over coordinates of ``x``.

    Runs in float64. With ``sg_aware`` the values produced by
    ``stop_gradient`` during the analytic pass are frozen for the numeric
    passes, so only non-stopped paths are perturbed; ``straight_through``
    replays its offset ``q - f`` the same way. ``f`` must issue the same
    sequence of these calls on every evaluation.
    """
    if eps <= 0:
        raise ValueError("gradient_check: eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    replay = _Replay() if sg_aware else None
    prev = getattr(_state, "sg_replay", None)
    _state.sg_replay = replay
    try:
        xt = Tensor(base.copy(), requires_grad=True)
        out = f(xt)
        if out.size != 1:
            raise ValueError(f"gradient_check: f must be scalar-valued, got shape {out.shape}")
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("gradient_check: f returned a non-finite value")
        if out.requires_grad:
            backward(out)
        analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
        if replay is not None:
            replay.recording = False

        def evaluate(arr: np.ndarray) -> float:
            if replay is not None:
                replay.cursor = 0
            with no_grad():
                val = f(Tensor(arr)).data
            if not np.all(np.isfinite(val)):
                raise FloatingPointError("gradient_check: f returned a non-finite value")
            return float(np.asarray(val, dtype=np.float64).reshape(-1)[0])

        worst = 0.0
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = evaluate(base)
            flat[i] = orig - eps
            lo = evaluate(base)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, float(err))
        return worst
    finally:
        _state.sg_replay = prev


# ---------------------------------------------------------------- containers

TENSOR_MAGIC = b"AMVQTNSR"
TENSOR_VERSION = 1


def write_tensor(fh, t: Tensor | np.ndarray) -> int:
    """Write one container; returns the number of bytes written."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    if arr.ndim > 255:
        raise ValueError("tensor rank exceeds container limit of 255")
    header = TENSOR_MAGIC + struct.pack("<HB", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def read_tensor(fh) -> Tensor:
    magic = fh.read(len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise ValueError(f"not a tensor container (magic {magic!r})")
    version, rank = struct.unpack("<HB", fh.read(3))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor container version {version}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(dims)) if dims else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError("truncated tensor payload")
    return Tensor(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims))


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
