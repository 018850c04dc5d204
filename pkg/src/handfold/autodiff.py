"""Define-by-run reverse-mode differentiation over dense numpy arrays.

Only the operators the network needs are provided. Every op records a node
with a monotonically increasing id, so append order is a valid topological
order and ``backward`` simply sweeps the reachable nodes by descending id.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import kernels

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_node_ids = itertools.count()

#: every differentiable operator the engine can record
OPS = ("add", "sub", "scale", "mul", "reshape", "expand", "row_slice", "concat_last", "gather_rows",
       "max_over_axis", "sum", "linear", "relu", "batch_norm", "dense_bn_relu", "dense_bn_relu_max",
       "smooth_l1")
_OPSET = frozenset(OPS)
_grad_hooks: dict[str, Callable] = {}
_recording = [True]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording graph nodes (outputs never require grad)."""
    prev = _recording[0]
    _recording[0] = False
    try:
        yield
    finally:
        _recording[0] = prev


@contextlib.contextmanager
def grad_hook(op: str, fn: Callable[[tuple], tuple]) -> Iterator[None]:
    """Debug hook: ``fn`` rewrites the input gradients produced by every ``op`` node."""
    if op not in _OPSET:
        raise KeyError(f"unknown op {op!r}")
    _grad_hooks[op] = fn
    try:
        yield
    finally:
        _grad_hooks.pop(op, None)


class DimensionError(ValueError):
    """Operand shapes do not fit the operator."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, double backward, ...)."""


def get_dtype() -> type:
    return _dtype


def set_dtype(name: str) -> None:
    global _dtype
    _dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the global float precision (``"float32"``/``"float64"``)."""
    global _dtype
    prev = _dtype
    _dtype = _DTYPES[name]
    try:
        yield
    finally:
        _dtype = prev


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple
    backward_fn: Callable | None
    consumed: bool = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data, t.requires_grad, t.grad, t.node, t.name = self.data, False, None, None, self.name
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data, t.requires_grad, t.grad, t.node, t.name = data, False, None, None, None
    return t


def _record(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    if op not in _OPSET:
        raise GraphError(f"unregistered op {op!r}")
    out = _wrap(data)
    if _recording[0] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(next(_node_ids), op, tuple(inputs), backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss: Tensor, retain_grads: bool = False) -> None:
    """Propagate d(loss)/d(.) to every reachable leaf with ``requires_grad``.

    Leaf gradients accumulate into ``.grad``. With ``retain_grads`` every
    intermediate tensor also keeps its gradient.
    """
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        if not loss.requires_grad:
            raise GraphError("loss not attached to graph")
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if loss.node.consumed:
        raise GraphError("backward called twice on the same graph")

    reachable: dict[int, tuple[Node, Tensor]] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        n = t.node
        if n is None or n.id in reachable:
            continue
        reachable[n.id] = (n, t)
        stack.extend(n.inputs)

    grads: dict[int, np.ndarray] = {loss.node.id: seed}
    for nid in sorted(reachable, reverse=True):
        node, out = reachable[nid]
        g = grads.pop(nid, None)
        if retain_grads:
            out.grad = g if g is not None else np.zeros_like(out.data)
        if g is None:
            node.backward_fn = None
            node.consumed = True
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        in_grads = node.backward_fn(g, needs)
        if _grad_hooks and node.op in _grad_hooks:
            in_grads = _grad_hooks[node.op](in_grads)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is not None:
                prev = grads.get(t.node.id)
                grads[t.node.id] = gi if prev is None else prev + gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
        node.backward_fn = None
        node.consumed = True


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(a.data + b.data, (a, b), "add", lambda g, needs: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _record(a.data - b.data, (a, b), "sub", lambda g, needs: (g, -g if needs[1] else None))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * x.data.dtype.type(c), (x,), "scale", lambda g, needs: (g * g.dtype.type(c),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _record(x.data.reshape(shape), (x,), "reshape", lambda g, needs: (g.reshape(src),))


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    axis = axis if axis >= 0 else x.ndim + 1 + axis
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _record(data, (x,), "expand", lambda g, needs: (g.sum(axis=axis),))


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the first axis."""
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"row_slice: [{start}:{stop}] outside {x.shape[0]} rows")

    def bw(g, needs):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _record(x.data[start:stop], (x,), "row_slice", bw)


def concat_last(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat_last: no inputs")
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat_last: leading shapes {lead} and {t.shape[:-1]} differ")
    if len(xs) == 1:
        return xs[0]
    widths = [t.shape[-1] for t in xs]
    bounds = np.cumsum([0] + widths)

    def bw(g, needs):
        return tuple(g[..., bounds[i]:bounds[i + 1]] if needs[i] else None for i in range(len(xs)))

    return _record(np.concatenate([t.data for t in xs], axis=-1), xs, "concat_last", bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[k] = x[idx[k]]`` for an index array of any shape; x is [N, C]."""
    idx = np.asarray(idx)
    if x.ndim != 2:
        raise DimensionError(f"gather_rows: expected [N, C] source, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    n, c = x.shape

    def bw(g, needs):
        return (kernels.scatter_add_rows(idx.reshape(-1).astype(np.int64),
                                         np.ascontiguousarray(g).reshape(-1, c), n),)

    return _record(x.data[idx], (x,), "gather_rows", bw)


def max_over_axis(x: Tensor, axis: int = -2) -> tuple[Tensor, np.ndarray]:
    """Channel-wise max over ``axis``; returns values and the argmax (lowest index on ties)."""
    axis = axis if axis >= 0 else x.ndim + axis
    S = x.shape[axis]
    if S == 0:
        raise DimensionError("max_over_axis: empty region")
    out_shape = x.shape[:axis] + x.shape[axis + 1:]
    a = int(np.prod(x.shape[:axis], dtype=np.int64))
    c = int(np.prod(x.shape[axis + 1:], dtype=np.int64))
    vals, arg = kernels.max_argmax(np.ascontiguousarray(x.data).reshape(a, S, c))

    def bw(g, needs):
        full = kernels.max_scatter(np.ascontiguousarray(g).reshape(a, c), arg, S)
        return (full.reshape(x.shape),)

    return _record(vals.reshape(out_shape), (x,), "max_over_axis", bw), arg.reshape(out_shape)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), "sum",
                   lambda g, needs: (np.full(shape, g, dtype=g.dtype),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _record(a.data * b.data, (a, b), "mul",
                   lambda g, needs: (g * b.data if needs[0] else None, g * a.data if needs[1] else None))


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    cin, cout = W.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    x2 = x.data.reshape(-1, cin)
    y = x2 @ W.data
    if b is not None:
        y += b.data
    lead = x.shape[:-1]

    def bw(g, needs):
        g2 = g.reshape(-1, cout)
        dx = (g2 @ W.data.T).reshape(lead + (cin,)) if needs[0] else None
        dW = x2.T @ g2 if needs[1] else None
        if b is None:
            return dx, dW
        return dx, dW, g2.sum(axis=0) if needs[2] else None

    inputs = (x, W) if b is None else (x, W, b)
    return _record(y.reshape(lead + (cout,)), inputs, "linear", bw)


def relu(x: Tensor) -> Tensor:
    return _record(np.maximum(x.data, 0), (x,), "relu", lambda g, needs: (g * (x.data > 0),))


@dataclass
class RunningStats:
    """Exponential moving averages of per-channel mean and variance."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "RunningStats":
        return cls(np.zeros(channels, dtype=np.float64), np.ones(channels, dtype=np.float64), momentum, eps)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, count: int) -> None:
        unbiased = batch_var * (count / (count - 1)) if count > 1 else batch_var
        m = self.momentum
        self.mean = (1 - m) * self.mean + m * batch_mean.astype(np.float64)
        self.var = (1 - m) * self.var + m * unbiased.astype(np.float64)


def _bn_forward(z: np.ndarray, gamma: np.ndarray, beta: np.ndarray, stats: RunningStats, training: bool,
                relu: bool) -> tuple[np.ndarray, np.ndarray]:
    # z is [rows, C]; it is overwritten with x-hat. Returns (y, inv_std).
    if training:
        mean, var = kernels.bn_stats(z)
        stats.update(mean, var, z.shape[0])
    else:
        mean, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + stats.eps)
    return kernels.bn_apply(z, mean, inv, gamma, beta, relu), inv


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool = True) -> Tensor:
    """Normalize over every axis but the last (channel) one."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: channel mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    xhat = np.ascontiguousarray(x.data.reshape(-1, c)).copy()
    y, inv = _bn_forward(xhat, gamma.data, beta.data, stats, training, False)
    shape = x.shape

    def bw(g, needs):
        dz, dgamma, dbeta, _ = kernels.bn_backward(np.ascontiguousarray(g.reshape(-1, c)), y, xhat,
                                                   gamma.data, inv, False, training)
        return dz.reshape(shape), dgamma.astype(g.dtype), dbeta.astype(g.dtype)

    return _record(y.reshape(shape), (x, gamma, beta), "batch_norm", bw)


def dense_bn_relu(x: Tensor, W: Tensor, b: Tensor, gamma: Tensor, beta: Tensor,
                  stats: RunningStats, training: bool = True) -> Tensor:
    """Fused ``relu(batch_norm(linear(x)))`` keeping two activations alive instead of four."""
    cin, cout = W.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"dense_bn_relu: input {x.shape} does not match weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, cin)
    xhat = x2 @ W.data
    xhat += b.data
    y, inv = _bn_forward(xhat, gamma.data, beta.data, stats, training, True)

    def bw(g, needs):
        dz, dgamma, dbeta, dsum = kernels.bn_backward(np.ascontiguousarray(g.reshape(-1, cout)), y, xhat,
                                                      gamma.data, inv, True, training)
        dx = (dz @ W.data.T).reshape(lead + (cin,)) if needs[0] else None
        dW = x2.T @ dz if needs[1] else None
        return dx, dW, dsum.astype(g.dtype), dgamma.astype(g.dtype), dbeta.astype(g.dtype)

    return _record(y.reshape(lead + (cout,)), (x, W, b, gamma, beta), "dense_bn_relu", bw)


def dense_bn_relu_max(x: Tensor, W: Tensor, b: Tensor, gamma: Tensor, beta: Tensor,
                      stats: RunningStats, training: bool = True) -> tuple[Tensor, np.ndarray]:
    """Fused ``max_over_axis(dense_bn_relu(x), axis=-2)``.

    Only the normalized pre-activation is kept for backward; the dense
    post-ReLU map and its gradient are never materialized.
    """
    cin, cout = W.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"dense_bn_relu_max: input {x.shape} does not match weight {W.shape}")
    if x.ndim < 2 or x.shape[-2] == 0:
        raise DimensionError("dense_bn_relu_max: empty region")
    S = x.shape[-2]
    lead = x.shape[:-2]
    a = int(np.prod(lead, dtype=np.int64))
    x2 = x.data.reshape(-1, cin)
    xhat = x2 @ W.data
    xhat += b.data
    if training:
        mean, var = kernels.bn_stats(xhat)
        stats.update(mean, var, xhat.shape[0])
    else:
        mean, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + stats.eps)
    vals, arg = kernels.bn_relu_max(xhat, mean, inv, gamma.data, beta.data, a, S)

    def bw(g, needs):
        dz, dgamma, dbeta, dsum = kernels.bn_relu_max_backward(
            np.ascontiguousarray(g).reshape(a, cout), vals, arg, xhat, gamma.data, inv, S, training)
        dx = (dz @ W.data.T).reshape(x.shape) if needs[0] else None
        dW = x2.T @ dz if needs[1] else None
        return dx, dW, dsum.astype(g.dtype), dgamma.astype(g.dtype), dbeta.astype(g.dtype)

    out = _record(vals.reshape(lead + (cout,)), (x, W, b, gamma, beta), "dense_bn_relu_max", bw)
    return out, arg.reshape(lead + (cout,))


# ---------------------------------------------------------------------------
# loss primitives


def smooth_l1(x: Tensor, variant: str = "kinked") -> Tensor:
    """Elementwise smooth-L1 with threshold 0.01.

    ``kinked``: 0.5|x| below the threshold, |x| - 0.005 above.
    ``huber``: 50 x^2 below the threshold, |x| - 0.005 above.
    """
    a = np.abs(x.data)
    small = a < 0.01
    if variant == "kinked":
        out = np.where(small, 0.5 * a, a - 0.005)
        slope = np.where(small, 0.5, 1.0) * np.sign(x.data)
    elif variant == "huber":
        out = np.where(small, 50.0 * x.data * x.data, a - 0.005)
        slope = np.where(small, 100.0 * x.data, np.sign(x.data))
    else:
        raise ValueError(f"unknown smooth-L1 variant {variant!r}")
    slope = slope.astype(x.data.dtype)
    return _record(out.astype(x.data.dtype), (x,), "smooth_l1", lambda g, needs: (g * slope,))


# ---------------------------------------------------------------------------
# finite-difference oracle


def numerical_grad(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-3,
                   indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t.data`` (flat ``indices``)."""
    flat = t.data.reshape(-1)
    idxs = range(flat.size) if indices is None else indices
    out = np.zeros(len(idxs))
    for k, i in enumerate(idxs):
        orig = flat[i]
        with no_grad():
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
        flat[i] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-relative difference; ``floor`` keeps identically-zero gradients from dividing noise by noise."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
              indices: dict | None = None) -> float:
    """Relative error between backprop and central differences, over all ``inputs`` jointly.

    Errors are measured on the concatenated gradient vector, so an input whose
    true gradient is identically zero is compared against the overall scale.
    """
    for t in inputs:
        t.grad = None
    backward(f())
    analytic, numeric = [], []
    for t in inputs:
        sel = None if indices is None else indices.get(id(t))
        a = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        analytic.append(a if sel is None else a[np.asarray(sel)])
        numeric.append(numerical_grad(f, t, eps, sel))
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))

