"""Dense tensors with tape-based reverse-mode autodiff.

Every differentiable op is a plain function returning a new :class:`Tensor`.
When a :class:`Graph` is being recorded (``with record() as graph:``) and an
op input requires a gradient, the op appends a node holding its backward
closure. :func:`backward` walks those nodes in reverse recording order.

Ops also report to an optional per-thread hook (used by the profiler and the
FLOP counter) and, while checks are on, reject non-finite outputs.
"""

from __future__ import annotations

import functools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from time import perf_counter
from typing import Callable, Sequence

import numpy as np

from effvit.core import kernels
from effvit.core.rng import Rng
from effvit.errors import ContractError, NumericError, ParameterError, ShapeError, StateError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
DTYPE_NAMES = {v: k for k, v in DTYPES.items()}
DEFAULT_DTYPE = "f32"


def as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ParameterError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in DTYPE_NAMES:
        raise ParameterError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(as_dtype(dtype), copy=False)
        elif arr.dtype not in DTYPE_NAMES:
            arr = arr.astype(DTYPES[DEFAULT_DTYPE])
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={DTYPE_NAMES[self.dtype]}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------- graph state


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    replay: Callable[[], np.ndarray]
    graph: "Graph"


@dataclass(eq=False)
class Graph:
    nodes: list[Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> bool:
        """Recompute every node from its inputs; True iff all outputs match bit-exactly."""
        return all(np.array_equal(n.replay(), n.output.data) for n in self.nodes)


class _State(threading.local):
    def __init__(self):
        self.graphs: list[Graph] = []
        self.hook = None
        self.checks = True


_state = _State()


@contextmanager
def record():
    g = Graph()
    _state.graphs.append(g)
    try:
        yield g
    finally:
        _state.graphs.pop()


def recording() -> bool:
    return bool(_state.graphs)


@contextmanager
def op_hook(hook):
    """Install ``hook(name, category, seconds, inputs, out)`` for ops on this thread."""
    prev, _state.hook = _state.hook, hook
    try:
        yield hook
    finally:
        _state.hook = prev


def set_checks(enabled: bool) -> bool:
    prev, _state.checks = _state.checks, bool(enabled)
    return prev


def checks_enabled() -> bool:
    return _state.checks


@contextmanager
def no_checks():
    prev = set_checks(False)
    try:
        yield
    finally:
        set_checks(prev)


CATEGORIES = ("matmul", "reshape", "elementwise", "normalization", "softmax", "other")
OP_CATEGORY: dict[str, str] = {}


def _op(category: str):
    """Wrap a raw op ``fn(*args) -> (out_array, inputs, backward[, side_effect])``."""

    def deco(fn):
        name = fn.__name__.lstrip("_")
        OP_CATEGORY[name] = category

        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            hook = _state.hook
            if hook is None:
                res = fn(*args, **kwargs)
            else:
                t0 = perf_counter()
                res = fn(*args, **kwargs)
                dt = perf_counter() - t0
            y, inputs, back = res[0], res[1], res[2]
            dtype = inputs[0].dtype if inputs else y.dtype
            if y.dtype != dtype:
                y = y.astype(dtype)
            if _state.checks and not np.isfinite(y).all():
                raise NumericError(f"{name} produced non-finite values")
            out = Tensor(y)
            if _state.graphs and any(t.requires_grad for t in inputs):
                out.requires_grad = True
                g = _state.graphs[-1]
                out._node = Node(name, tuple(inputs), out, back,
                                 lambda: np.asarray(fn(*args, **kwargs)[0], dtype=dtype), g)
                g.nodes.append(out._node)
            if len(res) > 3 and res[3] is not None:
                res[3]()
            if hook is not None:
                hook(name, category, dt, inputs, out)
            return out

        return wrapper

    return deco


def _same_dtype(*ts: Tensor) -> np.dtype:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise ShapeError(f"dtype mismatch: {DTYPE_NAMES[dt]} vs {DTYPE_NAMES[t.dtype]}")
    return dt


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- creation


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: all extents must be >= 1")
    return shape


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), as_dtype(dtype)), requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), as_dtype(dtype)), requires_grad)


def full(shape, value: float, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, as_dtype(dtype)), requires_grad)


def uniform(shape, rng: Rng, lo=0.0, hi=1.0, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    shape = _check_shape(shape)
    dt = as_dtype(dtype)
    return Tensor(rng.uniform(int(np.prod(shape)), lo, hi, dt).reshape(shape), requires_grad)


def trunc_normal(shape, rng: Rng, std=0.02, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    shape = _check_shape(shape)
    dt = as_dtype(dtype)
    return Tensor(rng.trunc_normal(int(np.prod(shape)), std, dtype=dt).reshape(shape), requires_grad)


def tensor_new(shape, fill="zeros", *, value=0.0, rng: Rng | None = None, lo=0.0, hi=1.0,
               std=0.02, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    """Create a tensor; ``fill`` is one of zeros, ones, constant, uniform, trunc_normal."""
    if fill == "zeros":
        return zeros(shape, dtype, requires_grad)
    if fill == "ones":
        return ones(shape, dtype, requires_grad)
    if fill == "constant":
        return full(shape, value, dtype, requires_grad)
    if fill in ("uniform", "trunc_normal"):
        if rng is None:
            raise ParameterError(f"fill {fill!r} needs an rng")
        if fill == "uniform":
            return uniform(shape, rng, lo, hi, dtype, requires_grad)
        return trunc_normal(shape, rng, std, dtype, requires_grad)
    raise ParameterError(f"unknown fill {fill!r}")


# ---------------------------------------------------------------- elementwise


@_op("elementwise")
def _add(a: Tensor, b: Tensor):
    _same_dtype(a, b)
    _broadcast(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return a.data + b.data, (a, b), back


def add(a: Tensor, b: Tensor) -> Tensor:
    return _add(a, b)


@_op("elementwise")
def _mul(a: Tensor, b: Tensor):
    _same_dtype(a, b)
    _broadcast(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return a.data * b.data, (a, b), back


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _mul(a, b)


@_op("elementwise")
def _scale(x: Tensor, c: float):
    c = x.dtype.type(c)
    return x.data * c, (x,), lambda g: (g * c,)


def scale(x: Tensor, c: float) -> Tensor:
    return _scale(x, c)


@_op("elementwise")
def _relu(x: Tensor):
    mask = x.data > 0
    return np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,)


def relu(x: Tensor) -> Tensor:
    """Rectifier; the subgradient at exactly 0 is 0."""
    return _relu(x)


@_op("elementwise")
def _sigmoid(x: Tensor):
    y = 0.5 * (np.tanh(0.5 * x.data) + 1)
    return y, (x,), lambda g: (g * y * (1 - y),)


def sigmoid(x: Tensor) -> Tensor:
    return _sigmoid(x)


# ---------------------------------------------------------------- reductions


@_op("other")
def _sum(x: Tensor):
    return np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),)


def reduce_sum(x: Tensor) -> Tensor:
    return _sum(x)


@_op("other")
def _mean(x: Tensor):
    n = x.size

    def back(g):
        return (np.broadcast_to(g / n, x.shape),)

    return np.asarray(x.data.mean()), (x,), back


def reduce_mean(x: Tensor) -> Tensor:
    return _mean(x)


@_op("other")
def _global_avg_pool(x: Tensor):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape

    def back(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape),)

    return x.data.mean(axis=(2, 3)), (x,), back


def global_avg_pool(x: Tensor) -> Tensor:
    return _global_avg_pool(x)


@_op("other")
def _cross_entropy(logits: Tensor, labels: np.ndarray):
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [B,K] logits and [B] labels, got "
                         f"{logits.shape} and {labels.shape}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    idx = np.arange(z.shape[0])
    loss = np.mean(np.log(s[:, 0]) + m[:, 0] - z[idx, labels])

    def back(g):
        d = p.copy()
        d[idx, labels] -= 1
        return (d * (g / z.shape[0]),)

    return np.asarray(loss), (logits,), back


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``labels`` are class indices."""
    return _cross_entropy(logits, np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------- shape ops


@_op("reshape")
def _reshape(x: Tensor, shape: tuple[int, ...]):
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return y, (x,), lambda g: (g.reshape(x.shape),)


def reshape(x: Tensor, shape) -> Tensor:
    return _reshape(x, tuple(int(s) for s in shape))


@_op("reshape")
def _transpose_last2(x: Tensor):
    if x.ndim < 2:
        raise ShapeError("transpose_last2 needs at least 2 dims")
    return np.swapaxes(x.data, -1, -2).copy(), (x,), lambda g: (np.swapaxes(g, -1, -2),)


def transpose_last2(x: Tensor) -> Tensor:
    return _transpose_last2(x)


@_op("reshape")
def _concat_channels(*xs: Tensor):
    _same_dtype(*xs)
    rest = {(x.shape[0],) + x.shape[2:] for x in xs}
    if len(rest) != 1:
        raise ShapeError(f"concat_channels: non-channel extents differ: {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return np.concatenate([x.data for x in xs], axis=1), xs, back


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return _concat_channels(*xs)


@_op("reshape")
def _channel_slice(x: Tensor, start: int, stop: int):
    def back(g):
        gx = np.zeros(x.shape, g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return x.data[:, start:stop].copy(), (x,), back


def split_channels(x: Tensor, h) -> list[Tensor]:
    """Split along axis 1 into ``h`` equal parts, or into the listed sizes."""
    c = x.shape[1]
    if isinstance(h, int):
        if h < 1 or c % h:
            raise ShapeError(f"cannot split {c} channels into {h} equal parts")
        sizes = [c // h] * h
    else:
        sizes = [int(s) for s in h]
        if sum(sizes) != c or min(sizes) < 1:
            raise ShapeError(f"split sizes {sizes} do not partition {c} channels")
    bounds = np.cumsum([0] + sizes)
    return [_channel_slice(x, int(bounds[i]), int(bounds[i + 1])) for i in range(len(sizes))]


# ---------------------------------------------------------------- compute ops


@_op("matmul")
def _matmul(a: Tensor, b: Tensor):
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from exc

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return np.matmul(a.data, b.data), (a, b), back


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _matmul(a, b)


@_op("matmul")
def _linear(x: Tensor, w: Tensor, b: Tensor | None):
    ins = (x, w) if b is None else (x, w, b)
    _same_dtype(*ins)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ w.data, g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return y, ins, back


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` laid out [out_features, in_features]."""
    return _linear(x, w, b)


@_op("softmax")
def _softmax_lastdim(x: Tensor):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return y, (x,), back


def softmax_lastdim(x: Tensor) -> Tensor:
    return _softmax_lastdim(x)


def conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _taps(xp, kh, kw, stride, ho, wo):
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return cols[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _conv_dense_fwd(xp, w, stride, ho, wo):
    cout, cin, kh, kw = w.shape
    if kh == kw == 1 and stride == 1:
        b = xp.shape[0]
        return np.matmul(w.reshape(cout, cin), xp.reshape(b, cin, -1)).reshape(b, cout, ho, wo)
    cols = _taps(xp, kh, kw, stride, ho, wo)
    return np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_dense_bwd(g, xp, w, stride):
    cout, cin, kh, kw = w.shape
    b, _, ho, wo = g.shape
    if kh == kw == 1 and stride == 1:
        g3 = g.reshape(b, cout, -1)
        x3 = xp.reshape(b, cin, -1)
        gw = np.einsum("boh,bch->oc", g3, x3).reshape(w.shape)
        gxp = np.matmul(w.reshape(cout, cin).T, g3).reshape(xp.shape)
        return gxp, gw
    cols = _taps(xp, kh, kw, stride, ho, wo)
    gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
    gcols = np.tensordot(g, w, axes=([1], [0]))  # [B,ho,wo,Cin,kh,kw]
    gxp = np.zeros(xp.shape, g.dtype)
    for p in range(kh):
        for q in range(kw):
            gxp[:, :, p : p + stride * (ho - 1) + 1 : stride, q : q + stride * (wo - 1) + 1 : stride] += (
                gcols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
            )
    return gxp, gw


@_op("matmul")
def _conv2d(x: Tensor, w: Tensor, bias: Tensor | None, stride: int, pad: int, groups: int):
    ins = (x, w) if bias is None else (x, w, bias)
    _same_dtype(*ins)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    b, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups or cin // groups != cin_g:
        raise ShapeError(f"conv2d: Cin={cin}, Cout={cout}, weight {w.shape} incompatible with groups={groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs Cout={cout}")
    if stride < 1 or pad < 0:
        raise ParameterError(f"conv2d: invalid stride={stride} or pad={pad}")
    ho, wo = conv_out_extent(h, kh, stride, pad), conv_out_extent(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    depthwise = groups == cin == cout
    if depthwise:
        y = kernels.dw_forward(xp, np.ascontiguousarray(w.data[:, 0]), stride, ho, wo)
    elif groups == 1:
        y = _conv_dense_fwd(xp, w.data, stride, ho, wo)
    else:
        og = cout // groups
        y = np.concatenate([
            _conv_dense_fwd(xp[:, i * cin_g : (i + 1) * cin_g], w.data[i * og : (i + 1) * og], stride, ho, wo)
            for i in range(groups)
        ], axis=1)
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    def back(g):
        g = np.ascontiguousarray(g)
        if depthwise:
            gxp = kernels.dw_backward_input(g, np.ascontiguousarray(w.data[:, 0]), stride, *xp.shape[2:])
            gw = kernels.dw_backward_weight(g, xp, stride, kh, kw)[:, None]
        elif groups == 1:
            gxp, gw = _conv_dense_bwd(g, xp, w.data, stride)
        else:
            og = cout // groups
            parts = [
                _conv_dense_bwd(g[:, i * og : (i + 1) * og], xp[:, i * cin_g : (i + 1) * cin_g],
                                w.data[i * og : (i + 1) * og], stride)
                for i in range(groups)
            ]
            gxp = np.concatenate([p[0] for p in parts], axis=1)
            gw = np.concatenate([p[1] for p in parts], axis=0)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return y, ins, back


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation. ``w`` is [Cout, Cin/groups, kh, kw]."""
    return _conv2d(x, w, bias, int(stride), int(pad), int(groups))


@_op("normalization")
def _batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               mode: str, momentum: float, eps: float):
    _same_dtype(x, gamma, beta)
    if eps <= 0:
        raise ParameterError(f"batchnorm eps must be > 0, got {eps}")
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects [B,C] or [B,C,H,W], got {x.shape}")
    c = x.shape[1]
    for t in (gamma, beta, running_mean, running_var):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm parameter {t.shape} vs {c} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    gam = gamma.data.reshape(bshape)

    if mode == "infer":
        invstd = 1.0 / np.sqrt(running_var.data + x.dtype.type(eps))
        xhat = (x.data - running_mean.data.reshape(bshape)) * invstd.reshape(bshape)

        def back(g):
            return g * gam * invstd.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return xhat * gam + beta.data.reshape(bshape), (x, gamma, beta), back

    if mode != "train":
        raise ParameterError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    n = x.size // c
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    invstd = (1.0 / np.sqrt(var + x.dtype.type(eps))).reshape(bshape)
    xhat = (x.data - mu.reshape(bshape)) * invstd

    def back(g):
        gh = g * gam
        gx = invstd / n * (n * gh - gh.sum(axis=axes, keepdims=True)
                           - xhat * (gh * xhat).sum(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    def update_running():
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased

    return xhat * gam + beta.data.reshape(bshape), (x, gamma, beta), back, update_running


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
              mode: str = "infer", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over channel axis 1.

    ``infer`` normalizes with the running statistics. ``train`` normalizes with
    the batch statistics and then updates ``running_mean``/``running_var`` in
    place (running variance uses the unbiased batch estimate).
    """
    return _batchnorm(x, gamma, beta, running_mean, running_var, mode, float(momentum), float(eps))


# ---------------------------------------------------------------- custom ops


def custom_op(name: str, category: str, forward: Callable, backward: Callable, *inputs: Tensor) -> Tensor:
    """Run a user-defined op through the same recording/profiling path.

    ``forward(*arrays) -> array``; ``backward(g, *arrays) -> tuple of input grads``.
    """

    def raw(*ts):
        arrays = [t.data for t in ts]
        return forward(*arrays), ts, lambda g: backward(g, *arrays)

    raw.__name__ = name
    return _op(category)(raw)(*inputs)


# ---------------------------------------------------------------- backward


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate (``+=``) into any existing ``.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or loss._node.graph is not graph:
        raise StateError("loss was not recorded in this graph (was recording active and did "
                         "any input require grad?)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if t._node is None:
                leaves[key] = t
    for key, t in leaves.items():
        g = np.asarray(grads[key], dtype=t.dtype).reshape(t.shape)
        if t.grad is None:
            t.grad = Tensor(g.copy())
        else:
            t.grad = Tensor(t.grad.data + g)


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (f64 only)."""
    if x.dtype != np.float64:
        raise ContractError("finite_diff_grad requires an f64 input")
    if eps <= 0:
        raise ParameterError("eps must be > 0")

    def scalar(v):
        out = f(Tensor(v))
        arr = np.asarray(out.data if isinstance(out, Tensor) else out)
        if arr.size != 1:
            raise ContractError(f"finite_diff_grad: f returned shape {arr.shape}, not a scalar")
        return float(arr.reshape(-1)[0])

    base = x.data.copy()
    flat = base.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = scalar(base.copy())
        flat[i] = orig - eps
        fm = scalar(base.copy())
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return Tensor(grad.reshape(x.shape))
