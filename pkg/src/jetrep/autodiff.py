"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A ``GradientTape`` records operations in execution order; ``backward``
replays the tape once in reverse, accumulating gradients into every
``TensorNode`` that requires them. Everything is 64-bit and the replay
order is fixed, so backward passes are bitwise repeatable.

Only the operations needed by the particle-cloud encoder, its heads and
the training losses are provided. No graph optimization, no higher-order
derivatives.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "AutodiffError",
    "DimensionError",
    "GradientTape",
    "TensorNode",
    "add", "sub", "mul", "div", "neg", "matmul",
    "reshape", "transpose", "concat", "gather_rows", "slice_last",
    "reduce_sum", "reduce_mean",
    "exp", "log", "sqrt", "relu", "gelu", "geglu",
    "softmax", "log_softmax", "layer_norm", "l2_normalize",
    "dropout_mask", "drop_path", "backward",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class AutodiffError(Exception):
    """Base class for autodiff contract violations."""


class DimensionError(AutodiffError):
    """Operand shapes are incompatible for the requested operation."""


# ---------------------------------------------------------------------------
# tape machinery
# ---------------------------------------------------------------------------

_TAPE_STACK: list["GradientTape"] = []


class GradientTape:
    """Ordered record of operations, replayed in reverse by `backward`.

    Use as a context manager around the forward pass:

        with GradientTape() as tape:
            loss = ...
        backward(loss, tape)
    """

    def __init__(self):
        # each entry: (output, inputs tuple, backward_fn(g) -> grads tuple)
        self.ops = []

    def record(self, output, inputs, backward_fn):
        self.ops.append((output, inputs, backward_fn))

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.ops)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class TensorNode:
    """Shape-carrying float64 array participating in a gradient tape."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"TensorNode(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays on either side become constants
    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        return mul(self, _as_node(other))

    def __rmul__(self, other):
        return mul(_as_node(other), self)

    def __truediv__(self, other):
        return div(self, _as_node(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_node(other))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_node(x):
    if isinstance(x, TensorNode):
        return x
    return TensorNode(x)


def _make(values, inputs, backward_fn):
    """Create the output node and record the op when a tape is active."""
    out = TensorNode(values)
    out.requires_grad = any(n.requires_grad for n in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_node(a), _as_node(b)
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(g, b.shape) if b.requires_grad else None))


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g, b.shape) if b.requires_grad else None))


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * av, b.shape) if b.requires_grad else None))


def div(a, b):
    a, b = _as_node(a), _as_node(b)
    av, bv = a.values, b.values
    return _make(av / bv, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g * av / (bv * bv), b.shape)
                            if b.requires_grad else None))


def neg(a):
    return _make(-a.values, (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product with numpy stacked-matmul broadcasting.

    Backward: a.grad += g @ b^T, b.grad += a^T @ g (leading broadcast axes
    are summed out).
    """
    a, b = _as_node(a), _as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            if ga.shape != a.shape:
                ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
            if gb.shape != b.shape:
                gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(np.matmul(av, bv), (a, b), back)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.values, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def concat(nodes, axis):
    nodes = [_as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([n.values for n in nodes], axis=axis), tuple(nodes), back)


def gather_rows(a, indices):
    """Select rows of a 2-D node; backward scatter-adds into place."""
    if a.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D node, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def back(g):
        ga = np.zeros(shape, dtype=np.float64)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.values[idx], (a,), back)


def slice_last(a, start, stop):
    """Slice the last axis; backward zero-pads back to the input shape."""
    shape = a.shape

    def back(g):
        ga = np.zeros(shape, dtype=np.float64)
        ga[..., start:stop] = g
        return (ga,)

    return _make(a.values[..., start:stop], (a,), back)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False):
    shape = a.shape
    return _make(a.values.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand_reduced(g, shape, axis, keepdims),))


def reduce_mean(a, axis=None, keepdims=False):
    shape = a.shape
    count = a.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return _make(a.values.mean(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def exp(a):
    y = np.exp(a.values)
    return _make(y, (a,), lambda g: (g * y,))


def log(a):
    av = a.values
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    y = np.sqrt(a.values)
    return _make(y, (a,), lambda g: (g * (0.5 / y),))


def relu(a):
    av = a.values
    return _make(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


def gelu(a):
    """Exact Gaussian-CDF GELU: x * Phi(x), with Phi from erf."""
    av = a.values
    cdf = 0.5 * (1.0 + erf(av * _INV_SQRT2))
    pdf = np.exp(-0.5 * av * av) * _INV_SQRT2PI
    return _make(av * cdf, (a,), lambda g: (g * (cdf + av * pdf),))


def geglu(x, w, v):
    """Gated FFN activation gelu(x @ w) * (x @ v)."""
    if w.shape != v.shape:
        raise DimensionError(f"geglu gate/value shapes differ: {w.shape} vs {v.shape}")
    return mul(gelu(matmul(x, w)), matmul(x, v))


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def softmax(a, axis):
    """Overflow-safe softmax; exponentials taken after subtracting the axis max."""
    av = a.values
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), back)


def log_softmax(a, axis):
    av = a.values
    shifted = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), back)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    gain, bias = _as_node(gain), _as_node(bias)
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values

    def back(g):
        dx = dgain = dbias = None
        if x.requires_grad:
            dxhat = g * gv
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            dgain = _unbroadcast((g * xhat).sum(axis=axes) if axes else g * xhat,
                                 gain.shape)
        if bias.requires_grad:
            dbias = _unbroadcast(g.sum(axis=axes) if axes else g, bias.shape)
        return dx, dgain, dbias

    return _make(xhat * gv + bias.values, (x, gain, bias), back)


def l2_normalize(x, eps=1e-12):
    """Scale rows (last axis) to unit L2 norm."""
    sq = reduce_sum(mul(x, x), axis=-1, keepdims=True)
    return div(x, sqrt(add(sq, _as_node(eps))))


# ---------------------------------------------------------------------------
# stochastic regularizers (masks are constants; no gradient flows into them)
# ---------------------------------------------------------------------------

def dropout_mask(shape, rate, rng, training):
    """Inverted-dropout keep mask: Bernoulli(1-rate)/(1-rate) when training, else ones."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return np.ones(shape, dtype=np.float64)
    keep = (rng.random(shape) >= rate).astype(np.float64)
    return keep / (1.0 - rate)


def drop_path(branch, rate, scale, rng, training):
    """Stochastic depth: zero the whole residual branch per sample, then scale.

    Sample axis is the leading axis of `branch`. Kept samples are rescaled
    by 1/(1-rate); at inference the branch is deterministically scaled.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop_path rate must be in [0, 1), got {rate}")
    if scale <= 0.0:
        raise ValueError(f"drop_path scale must be positive, got {scale}")
    if not training or rate == 0.0:
        if scale == 1.0:
            return branch
        return mul(branch, _as_node(scale))
    n = branch.shape[0]
    keep = (rng.random(n) >= rate).astype(np.float64) / (1.0 - rate)
    keep = keep.reshape((n,) + (1,) * (branch.ndim - 1))
    return mul(branch, _as_node(keep * scale))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss, tape):
    """Populate .grad on every requires_grad node reachable on the tape.

    Replays the recorded ops once in reverse order; deterministic for a
    fixed forward pass.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.values)
    for output, inputs, backward_fn in reversed(tape.ops):
        g = output.grad
        if g is None:
            continue
        grads = backward_fn(g)
        for node, gr in zip(inputs, grads):
            if gr is None or not node.requires_grad:
                continue
            if node.grad is None:
                # own fresh writable arrays outright; copy anything that is
                # (or views) the upstream gradient, since later += would
                # corrupt shared storage
                if gr.base is None and gr.flags.writeable and gr is not g:
                    node.grad = gr
                else:
                    node.grad = np.array(gr, dtype=np.float64)
            else:
                node.grad += gr
    # participants that never received a contribution still get explicit zeros
    for _, inputs, _ in tape.ops:
        for node in inputs:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.values)
