"""Tiny reverse-mode autodiff engine on float64 numpy arrays.

Every numeric quantity in the detector (feature maps, pooled patches,
task vectors, fusion weights, losses) is a ``Tensor``.  Operations record
themselves on the active ``Tape`` in execution order, which is already a
topological order, so ``backward`` is a single reverse sweep.  A fresh
tape is opened for every training step; with no tape active all ops run
in inference mode (outputs never require grad, nothing is recorded).

Any op that produces a NaN/Inf value raises ``NonFiniteError`` immediately.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np


class GraphError(Exception):
    """Misuse of the tape/backward machinery."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-d float64 array with an optional gradient of the same shape."""

    __slots__ = ("values", "requires_grad", "grad", "_node", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the broadcast-free elementwise ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "grad_fn", "name")

    def __init__(self, out, inputs, grad_fn, name):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.name = name


class Tape:
    """Ordered record of operations for one forward+backward pair.

    Use as a context manager.  Confined to one thread; parallel code must
    use one tape per thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        if popped is not self:
            raise GraphError("tape stack corrupted: tapes closed out of order")
        return False


def apply_op(name: str, out_values: np.ndarray, inputs: Sequence[Tensor],
             grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Create an op output, recording it on the active tape when needed.

    ``grad_fn`` receives the output gradient and returns one gradient
    array (or None) per input, in input order.  Custom ops outside this
    module (e.g. RoI pooling) build on this entry point.
    """
    out_values = np.asarray(out_values, dtype=np.float64)
    if not np.all(np.isfinite(out_values)):
        raise NonFiniteError(f"{name}: produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    if out_values.ndim and not out_values.flags["C_CONTIGUOUS"]:
        out_values = np.ascontiguousarray(out_values)
    out.values = out_values
    out.requires_grad = needs
    out.grad = None
    out._node = None
    out._tape = None
    if needs:
        node = _Node(out, tuple(inputs), grad_fn, name)
        tape.nodes.append(node)
        out._node = node
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of everything reachable from ``loss``.

    Gradients accumulate additively across uses and across calls, until
    explicitly zeroed.
    """
    if loss.shape != ():
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._node is None or loss._tape is None:
        raise GraphError("loss is not connected to a recorded tape")
    tape: Tape = loss._tape
    if not tape.nodes:
        raise GraphError("tape is empty")
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        out_grad = node.out.grad
        if out_grad is None:
            continue
        grads = node.grad_fn(out_grad)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"{node.name}: produced non-finite gradient")
            if g.shape != inp.values.shape:
                raise GraphError(
                    f"{node.name}: gradient shape {g.shape} != value shape {inp.values.shape}")
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.values)
            inp.grad += g


# ---------------------------------------------------------------------------
# elementwise ops (broadcast-free: operand shapes must match exactly)

def _check_same_shape(name, a, b):
    if a.values.shape != b.values.shape:
        raise ValueError(f"{name}: shape mismatch {a.values.shape} vs {b.values.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return apply_op("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return apply_op("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    av, bv = a.values, b.values
    return apply_op("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0.0)
    mask = x.values > 0.0
    return apply_op("relu", out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return apply_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.values
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.values
    shifted = v - np.max(v, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def grad_fn(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return apply_op("log_softmax", out, (x,), grad_fn)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber: 0.5*x^2 inside |x|<1, |x|-0.5 outside."""
    v = x.values
    a = np.abs(v)
    out = np.where(a < 1.0, 0.5 * v * v, a - 0.5)
    return apply_op("smooth_l1", out, (x,), lambda g: (g * np.clip(v, -1.0, 1.0),))


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable."""
    _check_same_shape("bce_with_logits", logits, targets)
    x, y = logits.values, targets.values
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def grad_fn(g):
        return (g * (sig - y), g * (-x))

    return apply_op("bce_with_logits", out, (logits, targets), grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient to the constant)."""
    c = float(c)
    return apply_op("scale", x.values * c, (x,), lambda g: (g * c,))


def scalar_mul(s: Tensor, x: Tensor) -> Tensor:
    """Scale a tensor by a scalar Tensor; gradient flows to both."""
    if s.shape != ():
        raise ValueError(f"scalar_mul: weight must be scalar, got shape {s.shape}")
    sv, xv = s.values, x.values

    def grad_fn(g):
        return (np.asarray(np.sum(g * xv)), g * sv)

    return apply_op("scalar_mul", sv * xv, (s, x), grad_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias b[C] to x[N,C,...] (channel axis 1)."""
    if b.values.ndim != 1 or x.values.ndim < 2 or x.values.shape[1] != b.values.shape[0]:
        raise ValueError(f"add_bias: bias {b.values.shape} does not fit input {x.values.shape}")
    bshape = (1, b.values.shape[0]) + (1,) * (x.values.ndim - 2)
    reduce_axes = (0,) + tuple(range(2, x.values.ndim))

    def grad_fn(g):
        return (g, np.sum(g, axis=reduce_axes))

    return apply_op("add_bias", x.values + b.values.reshape(bshape), (x, b), grad_fn)


# ---------------------------------------------------------------------------
# reductions / shape ops

def tsum(x: Tensor, axis=None) -> Tensor:
    v = x.values
    if axis is None:
        def grad_fn(g):
            return (np.broadcast_to(g, v.shape).copy(),)
        return apply_op("sum", np.sum(v), (x,), grad_fn)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)

    def grad_fn(g):
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge, v.shape).copy(),)

    return apply_op("sum", np.sum(v, axis=axes), (x,), grad_fn)


def tmean(x: Tensor, axis=None) -> Tensor:
    v = x.values
    if axis is None:
        n = v.size
        def grad_fn(g):
            return (np.broadcast_to(g / n, v.shape).copy(),)
        return apply_op("mean", np.mean(v), (x,), grad_fn)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = int(np.prod([v.shape[a] for a in axes]))

    def grad_fn(g):
        ge = np.expand_dims(g / n, axes)
        return (np.broadcast_to(ge, v.shape).copy(),)

    return apply_op("mean", np.mean(v, axis=axes), (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.values.shape
    return apply_op("reshape", x.values.reshape(shape), (x,),
                    lambda g: (g.reshape(old),))


def transpose2d(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ValueError(f"transpose2d: expected 2-d, got {x.values.shape}")
    return apply_op("transpose2d", x.values.T.copy(), (x,), lambda g: (g.T.copy(),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ValueError("concat: empty parts list")
    vals = [p.values for p in parts]
    ref = vals[0].shape
    ax = axis % len(ref)
    for v in vals[1:]:
        if len(v.shape) != len(ref) or any(
                v.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {[v.shape for v in vals]}")
    sizes = [v.shape[ax] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return apply_op("concat", np.concatenate(vals, axis=ax), tuple(parts), grad_fn)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("stack: empty parts list")
    vals = [p.values for p in parts]
    for v in vals[1:]:
        if v.shape != vals[0].shape:
            raise ValueError(f"stack: shape mismatch {v.shape} vs {vals[0].shape}")

    def grad_fn(g):
        return tuple(np.ascontiguousarray(s) for s in np.moveaxis(g, axis, 0))

    return apply_op("stack", np.stack(vals, axis=axis), tuple(parts), grad_fn)


def weighted_concat(parts: Sequence[tuple], axis: int = -1) -> Tensor:
    """Concatenate tensors scaled by scalar weights: [w1*x1, w2*x2, ...].

    Gradient flows to every part and every weight.
    """
    if not parts:
        raise ValueError("weighted_concat: empty parts list")
    feats = [p for p, _ in parts]
    weights = [w for _, w in parts]
    for w in weights:
        if w.shape != ():
            raise ValueError(f"weighted_concat: weight must be scalar, got {w.shape}")
    vals = [f.values for f in feats]
    ref = vals[0].shape
    ax = axis % len(ref)
    for v in vals[1:]:
        if len(v.shape) != len(ref) or any(
                v.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(
                f"weighted_concat: incompatible shapes {[v.shape for v in vals]}")
    scaled = [w.values * v for w, v in zip(weights, vals)]
    sizes = [v.shape[ax] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        gs = np.split(g, splits, axis=ax)
        feat_grads = [gi * w.values for gi, w in zip(gs, weights)]
        w_grads = [np.asarray(np.sum(gi * v)) for gi, v in zip(gs, vals)]
        return tuple(feat_grads) + tuple(w_grads)

    return apply_op("weighted_concat", np.concatenate(scaled, axis=ax),
                    tuple(feats) + tuple(weights), grad_fn)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows (axis 0) by integer index; gradient scatter-adds back."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.values.shape

    def grad_fn(g):
        dx = np.zeros(shape, dtype=np.float64)
        np.add.at(dx, idx, g)
        return (dx,)

    return apply_op("gather_rows", x.values[idx], (x,), grad_fn)


def take_per_row(x: Tensor, cols) -> Tensor:
    """x[i, cols[i]] for each row i of a 2-d tensor."""
    if x.values.ndim != 2:
        raise ValueError(f"take_per_row: expected 2-d, got {x.values.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    n, c = x.values.shape
    if cols.shape != (n,):
        raise ValueError(f"take_per_row: need {n} column indices, got {cols.shape}")
    if np.any(cols < 0) or np.any(cols >= c):
        raise ValueError("take_per_row: column index out of range")
    rows = np.arange(n)

    def grad_fn(g):
        dx = np.zeros((n, c), dtype=np.float64)
        dx[rows, cols] = g
        return (dx,)

    return apply_op("take_per_row", x.values[rows, cols], (x,), grad_fn)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each row k times consecutively: [n,d] -> [n*k,d]."""
    n, d = x.values.shape
    out = np.repeat(x.values, k, axis=0)

    def grad_fn(g):
        return (g.reshape(n, k, d).sum(axis=1),)

    return apply_op("repeat_rows", out, (x,), grad_fn)


def tile_rows(x: Tensor, k: int) -> Tensor:
    """Tile the whole matrix k times: [m,d] -> [k*m,d]."""
    m, d = x.values.shape
    out = np.tile(x.values, (k, 1))

    def grad_fn(g):
        return (g.reshape(k, m, d).sum(axis=0),)

    return apply_op("tile_rows", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} x {bv.shape}")

    def grad_fn(g):
        return (g @ bv.T, av.T @ g)

    return apply_op("matmul", av @ bv, (a, b), grad_fn)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, c, kh, kw), (sn, sh * stride, sw * stride, sc, sh, sw))
    return view.reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-d cross-correlation of x[N,C,H,W] with kernels w[O,C,kh,kw]."""
    xv, wv = x.values, w.values
    if xv.ndim != 4 or wv.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and kernel, got {xv.shape} and {wv.shape}")
    n, c, h, wd = xv.shape
    o, ck, kh, kw = wv.shape
    if ck != c:
        raise ValueError(f"conv2d: kernel {wv.shape} channel count does not match input {xv.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ValueError(f"conv2d: kernel {wv.shape} larger than padded input {xv.shape} (padding={padding})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xv
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = wv.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        dw = (gm.T @ cols).reshape(o, c, kh, kw) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                        dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return (dx, dw)

    return apply_op("conv2d", np.ascontiguousarray(out), (x, w), grad_fn)


# ---------------------------------------------------------------------------
# gradient oracle

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float) -> float:
    """Max relative error between backward() grads and central differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-2), i.e.
    near-zero gradients are compared absolutely.  ``f`` must be
    deterministic; this is verified by evaluating it twice.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"finite_diff_check: eps must be in (0, 1e-2], got {eps}")
    base1 = np.asarray(f(x).values).copy()
    base2 = np.asarray(f(x).values).copy()
    if not np.array_equal(base1, base2):
        raise ValueError("finite_diff_check: f is not deterministic")

    saved_grad = x.grad
    x.grad = None
    with Tape():
        y = f(x)
        backward(y)
    if x.grad is None:
        analytic = np.zeros_like(x.values)
    else:
        analytic = x.grad.copy()
    x.grad = saved_grad

    flat = x.values.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).values)
        flat[i] = orig - eps
        fm = float(f(x).values)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(x.values.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-2)
    return float(np.max(np.abs(analytic - numeric) / denom))
