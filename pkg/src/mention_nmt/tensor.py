"""Dense-array engine with reverse-mode differentiation.

Just enough ops for a transformer encoder-decoder and its extensions:
matmul, broadcasted elementwise arithmetic, reductions, embedding lookup,
layer norm, relu/sigmoid, masked softmax, log-softmax, dropout, and the
two loss heads (smoothed cross-entropy, binary cross-entropy).

Every op records a closure that accumulates gradients into its tensor
inputs; ``Tensor.backward()`` replays them over a topologically ordered
``Graph``.  Non-``Tensor`` operands (masks, python scalars) are treated
as constants and never receive gradients.

Precision is whatever dtype the leaf arrays carry: float64 for gradient
checking, float32 for training.  Masks should be pre-cast to the model
dtype by the caller; numpy scalar promotion keeps python floats neutral.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DegenerateMaskError(ValueError):
    """A masked softmax row has no unmasked entries outside zero mode."""


_GRAD_ENABLED = True
_FINITE_CHECKS = False

# Additive surrogate for -inf before masked softmax.  Large enough to
# underflow exp() for any sane activation magnitude, small enough to
# stay finite in float32.
MASK_NEG = 1e9


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_checks(enabled):
    """Validate every op output for NaN/Inf.  Slow; meant for tests."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """A numpy array plus an optional gradient buffer and backward hook."""

    def __init__(self, data, children=(), backward=None, op=""):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if _FINITE_CHECKS and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values out of op {op or 'leaf'!r}")
        self.data = data
        self.grad = None
        if _GRAD_ENABLED:
            self._children = tuple(c for c in children if isinstance(c, Tensor))
            self._backward = backward
        else:
            self._children = ()
            self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar loss."""
        if self.data.shape != ():
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        Graph(self).run_backward()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # operator sugar, wired to the module-level ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


class Graph:
    """Topologically ordered record of the ops reachable from a root.

    Children appear before parents, so the reversed order is a valid
    backward schedule; each node's hook runs exactly once.
    """

    def __init__(self, root):
        order = []
        visited = set()
        stack = [(root, iter(root._children))]
        visited.add(id(root))
        while stack:
            node, it = stack[-1]
            advanced = False
            for child in it:
                if id(child) not in visited:
                    visited.add(id(child))
                    stack.append((child, iter(child._children)))
                    advanced = True
                    break
            if not advanced:
                order.append(node)
                stack.pop()
        self.nodes = order

    def run_backward(self):
        root = self.nodes[-1]
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _raw(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, children, backward, op):
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values out of op {op!r}")
    return Tensor(data, children=children, backward=backward if _GRAD_ENABLED else None, op=op)


def add(a, b):
    da, db = _raw(a), _raw(b)
    out_data = da + db

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g, da.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(g, db.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b):
    da, db = _raw(a), _raw(b)
    out_data = da - db

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g, da.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(-g, db.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a, b):
    da, db = _raw(a), _raw(b)
    out_data = da * db

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g * db, da.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(g * da, db.shape))

    return _make(out_data, (a, b), backward, "mul")


def div(a, b):
    da, db = _raw(a), _raw(b)
    out_data = da / db

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g / db, da.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(-g * da / (db * db), db.shape))

    return _make(out_data, (a, b), backward, "div")


def neg(a):
    da = _raw(a)

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, -g)

    return _make(-da, (a,), backward, "neg")


def power(a, exponent):
    da = _raw(a)
    out_data = da ** exponent

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, g * exponent * da ** (exponent - 1))

    return _make(out_data, (a,), backward, "power")


def texp(a):
    da = _raw(a)
    out_data = np.exp(da)

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, g * out_data)

    return _make(out_data, (a,), backward, "exp")


def tlog(a):
    da = _raw(a)

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, g / da)

    return _make(np.log(da), (a,), backward, "log")


def matmul(a, b):
    """Batched matrix product; leading dims broadcast, weights may be 2-D."""
    da, db = _raw(a), _raw(b)
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError("matmul needs at least 2-D operands")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {da.shape} x {db.shape}")
    out_data = da @ db

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, _unbroadcast(g @ db.swapaxes(-1, -2), da.shape))
        if isinstance(b, Tensor):
            _accum(b, _unbroadcast(da.swapaxes(-1, -2) @ g, db.shape))

    return _make(out_data, (a, b), backward, "matmul")


def reshape(a, shape):
    da = _raw(a)

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, g.reshape(da.shape))

    return _make(da.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes):
    da = _raw(a)
    inverse = np.argsort(axes)

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, g.transpose(inverse))

    return _make(da.transpose(axes), (a,), backward, "transpose")


def tsum(a, axis=None, keepdims=False):
    da = _raw(a)
    out_data = da.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, _spread(g, da.shape, axis, keepdims))

    return _make(out_data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    da = _raw(a)
    out_data = da.mean(axis=axis, keepdims=keepdims)
    count = da.size if axis is None else np.prod([da.shape[ax] for ax in _axis_tuple(axis, da.ndim)])

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, _spread(g, da.shape, axis, keepdims) / count)

    return _make(out_data, (a,), backward, "mean")


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _spread(g, shape, axis, keepdims):
    """Broadcast a reduced gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, _axis_tuple(axis, len(shape)))
    return np.broadcast_to(g, shape)


def relu(a):
    da = _raw(a)
    out_data = np.maximum(da, 0)

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, g * (da > 0))

    return _make(out_data, (a,), backward, "relu")


def sigmoid(a):
    da = _raw(a)
    out_data = _expit(da)

    def backward(g):
        if isinstance(a, Tensor):
            _accum(a, g * out_data * (1 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def _expit(x):
    # overflow-safe logistic: exp() only ever sees non-positive arguments
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def embedding(weight, ids):
    """Row lookup ``weight[ids]``; ids is a constant integer array."""
    ids = np.asarray(ids)
    dw = _raw(weight)
    if ids.size and (ids.min() < 0 or ids.max() >= dw.shape[0]):
        raise ShapeError(f"embedding id out of range for table of {dw.shape[0]} rows")
    out_data = dw[ids]

    def backward(g):
        if isinstance(weight, Tensor):
            if weight.grad is None:
                weight.grad = np.zeros_like(dw)
            np.add.at(weight.grad, ids.reshape(-1), g.reshape(-1, dw.shape[-1]))

    return _make(out_data, (weight,), backward, "embedding")


def gather_last(a, ids):
    """Pick one entry along the last axis per leading position."""
    da = _raw(a)
    ids = np.asarray(ids)
    if ids.shape != da.shape[:-1]:
        raise ShapeError(f"gather ids shape {ids.shape} != leading shape {da.shape[:-1]}")
    out_data = np.take_along_axis(da, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        if isinstance(a, Tensor):
            scatter = np.zeros_like(da)
            np.put_along_axis(scatter, ids[..., None], g[..., None], axis=-1)
            _accum(a, scatter)

    return _make(out_data, (a,), backward, "gather_last")


def log_softmax(a, axis=-1):
    da = _raw(a)
    m = da.max(axis=axis, keepdims=True)
    z = da - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse

    def backward(g):
        if isinstance(a, Tensor):
            p = np.exp(out_data)
            _accum(a, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward, "log_softmax")


def softmax_masked(logits, mask, axis=-1, zero_mode=False):
    """Softmax restricted to mask==1 positions.

    Masked positions get an additive ``-MASK_NEG`` surrogate before the
    softmax and an exact zero write after it, so excluded probabilities
    are 0.0 rather than merely tiny.  Rows whose mask is all zero raise
    ``DegenerateMaskError`` unless ``zero_mode`` is set, in which case
    they come back as all-zero rows.

    ``mask`` is a constant 0/1 array broadcastable to ``logits``.
    """
    da = _raw(logits)
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    mask_b = np.broadcast_to(mask.astype(da.dtype), da.shape)
    shifted = da - (1 - mask_b) * da.dtype.type(MASK_NEG)
    m = shifted.max(axis=axis, keepdims=True)
    e = np.exp(shifted - m) * mask_b
    s = e.sum(axis=axis, keepdims=True)
    dead = s == 0
    if dead.any() and not zero_mode:
        raise DegenerateMaskError("softmax row with no unmasked entries")
    out_data = e / np.where(dead, 1.0, s)

    def backward(g):
        if isinstance(logits, Tensor):
            _accum(logits, out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)))

    return _make(out_data, (logits,), backward, "softmax_masked")


def philox_stream(seed, counter=0):
    """Replayable random stream keyed by (seed, counter).

    The same key always yields the same draws, independent of how any
    other stream was consumed, so training steps can be replayed
    bit-identically.
    """
    return np.random.default_rng(
        np.random.Philox(key=np.array([seed, counter], dtype=np.uint64)))


def dropout(a, rate, rng):
    """Inverted dropout; identity when rate is 0.  Train-mode only."""
    if rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    da = _raw(a)
    keep = (rng.random(da.shape) >= rate).astype(da.dtype) / da.dtype.type(1.0 - rate)
    return mul(a, keep)


def linear(x, weight, bias=None):
    """Affine map over the last axis: ``x @ weight (+ bias)``."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


def masked_mean(values, mask):
    """Mean of ``values`` over positions where the constant mask is 1."""
    mask = np.asarray(mask)
    total = float(mask.sum())
    if total == 0:
        raise ValueError("masked_mean over an all-zero mask")
    return mul(tsum(mul(values, mask.astype(_raw(values).dtype))), 1.0 / total)


def cross_entropy(log_probs, targets, mask, label_smoothing=0.0):
    """Token-level cross-entropy from log-probabilities.

    With smoothing eps the target distribution is the usual mixture
    (1-eps) * one_hot + eps / V, giving
    loss = (1-eps) * nll + eps * mean_over_vocab(-log p).
    Averaged over mask==1 positions.
    """
    nll = neg(gather_last(log_probs, targets))
    if label_smoothing > 0.0:
        smooth = neg(tmean(log_probs, axis=-1))
        tok = add(mul(nll, 1.0 - label_smoothing), mul(smooth, label_smoothing))
    else:
        tok = nll
    return masked_mean(tok, mask)


def binary_cross_entropy_with_logits(logits, targets, mask):
    """Stable per-position BCE, averaged over mask==1 positions.

    ``targets`` and ``mask`` are constant arrays shaped like ``logits``.
    """
    da = _raw(logits)
    targets = np.asarray(targets, dtype=da.dtype)
    tok_data = np.maximum(da, 0) - da * targets + np.log1p(np.exp(-np.abs(da)))

    def backward(g):
        if isinstance(logits, Tensor):
            _accum(logits, g * (_expit(da) - targets))

    tok = _make(tok_data, (logits,), backward, "bce_logits")
    return masked_mean(tok, mask)
