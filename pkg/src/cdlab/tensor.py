"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tape records primitive operations as they execute (define-by-run); backward()
replays it once in reverse. Everything is numpy underneath, all math in 64-bit.
The op set is just what small MLP/CNN/recurrent networks need -- no views, no
in-place mutation, no broadcasting surprises beyond numpy's own rules.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes incompatible for the requested op."""


class NonFinite(FloatingPointError):
    """A NaN or Inf appeared in a tensor value."""


class NotScalar(ValueError):
    """backward() needs a 0-dimensional loss."""


class MissingGrad(RuntimeError):
    """Optimizer step on a parameter without an accumulated gradient."""


# Finite checks catch NaN/Inf at the op that produced it instead of letting it
# propagate. Cost is one extra pass per op; keep on by default.
_CHECK_FINITE = True


def set_finite_checks(enabled):
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return prev


def _assert_finite(arr, ctx):
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite value produced by {ctx}")


class Tensor:
    """A dense float64 array plus a gradient accumulator.

    Tensors are immutable after creation except for grad accumulation; the
    optimizer mutates .data in place between tapes, never during one.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _assert_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tracked = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        """Same values, cut off from the tape."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; every route goes through the recorded primitives below.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of executed primitives, one per forward op.

    Construction order is a topological order by definition: an op's inputs
    always exist before the op runs. A tape belongs to one thread.
    """

    def __init__(self):
        self._nodes = []  # (out Tensor, inputs tuple, backward fn)

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data, inputs, backward_fn, ctx):
    """Build the output tensor and record it if gradients can flow to it."""
    _assert_finite(out_data, ctx)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out._tracked = False
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape._nodes.append((out, inputs, backward_fn))
    return out


def backward(tape, loss):
    """Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor.

    Visits each recorded node exactly once, in reverse execution order.
    Gradients add across multiple uses of the same tensor and across repeated
    backward calls (zero with zero_grad / the optimizer).
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.ndim != 0:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    pending = {loss: np.ones((), dtype=np.float64)}
    for out, inputs, backward_fn in reversed(tape._nodes):
        g = pending.pop(out, None)
        if g is None:
            continue
        if out.requires_grad:
            out.grad += g
        for inp, gi in zip(inputs, backward_fn(g)):
            if gi is None or not inp._tracked:
                continue
            if gi.shape != inp.shape:
                gi = np.broadcast_to(gi, inp.shape)
            acc = pending.get(inp)
            # Never mutate in place: backward fns may alias their upstream
            # gradient (e.g. add returns the same array for both inputs).
            pending[inp] = gi if acc is None else acc + gi
    for t, g in pending.items():
        if t.requires_grad:
            t.grad += g


def _unbroadcast(grad, shape):
    """Sum grad back down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shapes_ok(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b):
    _binary_shapes_ok(a, b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    _binary_shapes_ok(a, b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    _binary_shapes_ok(a, b)
    out = a.data * b.data
    return _make(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    _binary_shapes_ok(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb
    return _make(out, (a, b), bwd, "div")


def matmul(a, b):
    """Matrix product with numpy's stacked-matmul broadcasting on leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul needs tensors with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _make(out, (a, b), bwd, "matmul")


def concat(tensors, axis):
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def _reduce_bwd(x, axis, keepdims, g, scale=1.0):
    if axis is None:
        return np.full(x.shape, float(g) * scale)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g * scale, x.shape).copy() if scale != 1.0 else np.broadcast_to(g, x.shape).copy()


def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _make(out, (x,), lambda g: (_reduce_bwd(x, axis, keepdims, g),), "sum")


def mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.shape[a] for a in axis]))
    else:
        count = x.shape[axis]
    return _make(out, (x,), lambda g: (_reduce_bwd(x, axis, keepdims, g / count),), "mean")


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * (0.5 / out),), "sqrt")


def abs_(x):
    out = np.abs(x.data)
    return _make(out, (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x):
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (g * (x.data > 0.0),), "relu")


def elu(x, alpha=1.0):
    neg = alpha * np.expm1(x.data)
    pos_mask = x.data > 0.0
    out = np.where(pos_mask, x.data, neg)
    return _make(out, (x,), lambda g: (g * np.where(pos_mask, 1.0, neg + alpha),), "elu")


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x):
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return _make(out, (x,), bwd, "softmax")


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    def bwd(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)
    return _make(out, (x,), bwd, "log_softmax")


def _is_basic_index(index):
    if isinstance(index, (int, slice)) or index is Ellipsis or index is None:
        return True
    if isinstance(index, tuple):
        return all(_is_basic_index(i) for i in index)
    return False


def slice_(x, index):
    out = x.data[index]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=np.float64)
    else:
        out = np.ascontiguousarray(out)
    basic = _is_basic_index(index)
    def bwd(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g  # basic indexing never repeats elements
        else:
            np.add.at(gx, index, g)
        return (gx,)
    return _make(out, (x,), bwd, "slice")


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast(x, shape):
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def where(mask, a, b):
    """Select by a constant boolean mask; gradients route through both branches."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    def bwd(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(mask, 0.0, g), b.shape)
        return ga, gb
    return _make(out, (a, b), bwd, "where")


def conv1d(x, w, b=None):
    """Valid (no padding), stride-1 1-D convolution.

    x: [B, C_in, L], w: [C_out, C_in, K], b: [C_out] or None -> [B, C_out, L-K+1]
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv1d shapes: x {x.shape}, w {w.shape}")
    B, C, L = x.shape
    F, _, K = w.shape
    if L < K:
        raise ShapeMismatch(f"conv1d length {L} shorter than kernel {K}")
    Lo = L - K + 1
    cols = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=2)  # [B, C, Lo, K]
    cols = cols.transpose(0, 2, 1, 3).reshape(B * Lo, C * K)
    w_flat = w.data.reshape(F, C * K)
    out = cols @ w_flat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Lo, F).transpose(0, 2, 1)
    out = np.ascontiguousarray(out)

    def bwd(g):
        g2 = g.transpose(0, 2, 1).reshape(B * Lo, F)
        gw = (g2.T @ cols).reshape(F, C, K)
        gcols = (g2 @ w_flat).reshape(B, Lo, C, K)
        gx = np.zeros_like(x.data)
        for k in range(K):
            gx[:, :, k:k + Lo] += gcols[:, :, :, k].transpose(0, 2, 1)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bwd, "conv1d")


def max_pool1d(x, kernel=2, stride=None):
    """Max pooling over the last axis; trailing remainder is dropped."""
    if stride is None:
        stride = kernel
    if stride != kernel:
        raise ShapeMismatch("max_pool1d supports stride == kernel only")
    B, C, L = x.shape
    Lo = L // kernel
    windows = x.data[:, :, :Lo * kernel].reshape(B, C, Lo, kernel)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    def bwd(g):
        gw = np.zeros((B, C, Lo, kernel))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, :Lo * kernel] = gw.reshape(B, C, Lo * kernel)
        return (gx,)
    return _make(np.ascontiguousarray(out), (x,), bwd, "max_pool1d")


# Name-indexed dispatch so callers can drive the engine generically.
_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "concat": concat,
    "sum": sum_,
    "mean": mean,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": abs_,
    "relu": relu,
    "elu": elu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "conv1d": conv1d,
    "max_pool1d": max_pool1d,
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast": broadcast,
    "where": where,
}


def forward(tape, op_name, *inputs, **kwargs):
    """Run a named primitive under `tape` and record it.

    Thin dispatch layer over the op functions; useful for generic drivers and
    for tests that sweep every primitive.
    """
    if op_name not in _OPS:
        raise KeyError(f"unknown op {op_name!r}")
    with tape:
        return _OPS[op_name](*inputs, **kwargs)


class AdamState:
    """Adam moments for a fixed parameter list, plus the shared step counter."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state):
    """One bias-corrected Adam update over state.params; zeroes grads after."""
    for p in state.params:
        if p.grad is None:
            raise MissingGrad("parameter has no gradient accumulator")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        _assert_finite(update, "adam_step")
        p.data -= update
        p.grad = np.zeros_like(p.data)


def clip_grad_norm(params, max_norm):
    """Scale all grads so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
