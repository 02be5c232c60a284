"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records TensorNodes in creation order, which is by construction a
valid topological order of the computation graph, so backward() can walk
the tape once in reverse and accumulate gradients.  Calling backward twice
on the same tape without clearing grads adds a second copy of the gradient.

Besides the exact primitives (add, mul, matmul, conv2d, ...) the module
provides straight-through nodes whose backward rule is deliberately not the
true derivative: ste_round, ste_relu and ste_clip pass incoming gradients
through unchanged, masked_clip gates them to the in-range region, and
zero_grad_sign / stop_gradient block them entirely.
"""

from __future__ import annotations

import contextlib

import numpy as np

_ROUND_MODE = "even"
_LN2 = float(np.log(2.0))


@contextlib.contextmanager
def round_mode(mode):
    """Temporarily switch the rounding rule used by ste_round.

    "even" (round half to even) is the production rule.  "away" (round half
    away from zero) exists so a verification run can demonstrate that it
    catches a quantizer whose tie handling breaks the pruning boundary.
    """
    global _ROUND_MODE
    if mode not in ("even", "away"):
        raise ValueError(f"unknown round mode {mode!r}")
    previous = _ROUND_MODE
    _ROUND_MODE = mode
    try:
        yield
    finally:
        _ROUND_MODE = previous


def _round_array(x):
    if _ROUND_MODE == "even":
        return np.rint(x)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


class Tape:
    """Append-only record of nodes; position in `nodes` equals the node id."""

    def __init__(self):
        self.nodes = []
        self.next_id = 0

    def _register(self, node):
        node_id = self.next_id
        self.next_id += 1
        self.nodes.append(node)
        return node_id

    def tensor(self, value, requires_grad=False):
        """Create a leaf node holding a private float64 copy of `value`."""
        arr = np.array(value, dtype=np.float64)
        return TensorNode(self, arr, requires_grad, "leaf", (), None)

    def const(self, value):
        return self.tensor(value, requires_grad=False)

    def zero_grads(self):
        for node in self.nodes:
            node.grad = None


class TensorNode:
    """One array-valued vertex of the graph.

    grad stays None until backward touches the node; requires_grad nodes that
    backward never reaches are given explicit zeros at the end of the pass.
    """

    __slots__ = ("tape", "id", "value", "grad", "requires_grad", "op",
                 "_parents", "_backward")

    def __init__(self, tape, value, requires_grad, op, parents, backward_rule):
        self.tape = tape
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_rule
        self.id = tape._register(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"TensorNode(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_coerce(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_coerce(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(self.tape, other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean_(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _coerce(tape, x):
    if isinstance(x, TensorNode):
        if x.tape is not tape:
            raise ValueError("cannot combine nodes from different tapes")
        return x
    return tape.const(x)


def _make(op, value, parents, backward_rule):
    requires = any(p.requires_grad for p in parents)
    return TensorNode(parents[0].tape, np.asarray(value, dtype=np.float64),
                      requires, op, tuple(parents),
                      backward_rule if requires else None)


def _unbroadcast(grad, shape):
    """Sum a gradient over the axes broadcasting introduced to reach grad.shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss):
    """Accumulate d(loss)/d(node) into node.grad for every requires_grad node.

    Returns a map from node id to gradient array.  Requires a scalar loss.
    Each call seeds a fresh unit gradient, so repeated calls without a grad
    reset accumulate.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    pending = {loss.id: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[: loss.id + 1]):
        grad_out = pending.pop(node.id, None)
        if grad_out is None:
            continue
        if node.requires_grad:
            node.grad = grad_out if node.grad is None else node.grad + grad_out
        if node._backward is None:
            continue
        for parent, contribution in zip(node._parents, node._backward(grad_out)):
            if contribution is None or not parent.requires_grad:
                continue
            held = pending.get(parent.id)
            pending[parent.id] = contribution if held is None else held + contribution
    grads = {}
    for node in tape.nodes:
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            grads[node.id] = node.grad
    return grads


# ---------------------------------------------------------------------------
# exact primitives


def add(a, b):
    b = _coerce(a.tape, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.value + b.value, (a, b), rule)


def sub(a, b):
    b = _coerce(a.tape, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.value - b.value, (a, b), rule)


def mul(a, b):
    b = _coerce(a.tape, b)

    def rule(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make("mul", a.value * b.value, (a, b), rule)


def div(a, b):
    b = _coerce(a.tape, b)

    def rule(g):
        # g / b, not g * (1 / b): keeps s/s == 1 exact in the quantizer chain.
        ga = _unbroadcast(g / b.value, a.shape)
        gb = _unbroadcast(-g * a.value / (b.value * b.value), b.shape)
        return ga, gb

    return _make("div", a.value / b.value, (a, b), rule)


def neg(a):
    def rule(g):
        return (-g,)

    return _make("neg", -a.value, (a,), rule)


def abs_(a):
    signs = np.sign(a.value)

    def rule(g):
        return (g * signs,)

    return _make("abs", np.abs(a.value), (a,), rule)


def tanh_(a):
    t = np.tanh(a.value)

    def rule(g):
        return (g * (1.0 - t * t),)

    return _make("tanh", t, (a,), rule)


def pow2(a):
    v = np.exp2(a.value)

    def rule(g):
        return (g * v * _LN2,)

    return _make("pow2", v, (a,), rule)


def relu(a):
    positive = a.value > 0

    def rule(g):
        return (g * positive,)

    return _make("relu", np.where(positive, a.value, 0.0), (a,), rule)


def matmul(a, b):
    b = _coerce(a.tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")

    def rule(g):
        return g @ b.value.T, a.value.T @ g

    return _make("matmul", a.value @ b.value, (a, b), rule)


def sum_(a):
    def rule(g):
        return (g * np.ones_like(a.value),)

    return _make("sum", a.value.sum(), (a,), rule)


def mean_(a):
    size = a.value.size

    def rule(g):
        return (g / size * np.ones_like(a.value),)

    return _make("mean", a.value.mean(), (a,), rule)


def max_reduce(a):
    m = a.value.max()
    at_max = a.value == m
    count = at_max.sum()

    def rule(g):
        return (g * at_max / count,)

    return _make("max", m, (a,), rule)


def reshape(a, shape):
    shape = tuple(int(n) for n in shape)

    def rule(g):
        return (g.reshape(a.shape),)

    return _make("reshape", a.value.reshape(shape), (a,), rule)


def _im2col(padded, kh, kw, stride, oh, ow):
    n, c, _, _ = padded.shape
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, i : i + stride * oh : stride,
                                      j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of NCHW input with OIHW weights via im2col."""
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIHW weights")
    n, c, h, wdt = x.value.shape
    oc, ic, kh, kw = w.value.shape
    if ic != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {ic}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wdt + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d output would be empty")
    if padding:
        padded = np.pad(x.value, ((0, 0), (0, 0), (padding, padding),
                                  (padding, padding)))
    else:
        padded = x.value
    cols = _im2col(padded, kh, kw, stride, oh, ow)
    wm = w.value.reshape(oc, -1)
    out = np.einsum("ok,nkp->nop", wm, cols, optimize=True).reshape(n, oc, oh, ow)

    def rule(g):
        gm = g.reshape(n, oc, oh * ow)
        gw = np.einsum("nop,nkp->ok", gm, cols, optimize=True).reshape(w.value.shape)
        gcols = np.einsum("ok,nop->nkp", wm, gm, optimize=True)
        gcols = gcols.reshape(n, c, kh, kw, oh, ow)
        gpad = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i : i + stride * oh : stride,
                     j : j + stride * ow : stride] += gcols[:, :, i, j]
        if padding:
            gx = gpad[:, :, padding:-padding, padding:-padding]
        else:
            gx = gpad
        return gx, gw

    return _make("conv2d", out, (x, w), rule)


def maxpool2(x):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    if x.value.ndim != 4:
        raise ValueError("maxpool2 expects NCHW input")
    n, c, h, w = x.value.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError("maxpool2 input too small")
    cropped = x.value[:, :, : 2 * h2, : 2 * w2]
    windows = cropped.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h2, w2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gcrop = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gcrop = gcrop.reshape(n, c, 2 * h2, 2 * w2)
        if (2 * h2, 2 * w2) == (h, w):
            return (gcrop,)
        gx = np.zeros((n, c, h, w), dtype=np.float64)
        gx[:, :, : 2 * h2, : 2 * w2] = gcrop
        return (gx,)

    return _make("maxpool2", out, (x,), rule)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    z = logits.value
    if z.ndim != 2:
        raise ValueError("softmax_cross_entropy expects [batch, classes] logits")
    if labels.shape != (z.shape[0],):
        raise ValueError("labels must be a vector matching the batch dimension")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ValueError("label out of range")
    n = z.shape[0]
    shift = z.max(axis=1, keepdims=True)
    expz = np.exp(z - shift)
    norm = expz.sum(axis=1, keepdims=True)
    probs = expz / norm
    nll = np.log(norm[:, 0]) + shift[:, 0] - z[np.arange(n), labels]

    def rule(g):
        gz = probs.copy()
        gz[np.arange(n), labels] -= 1.0
        return (gz * (g / n),)

    return _make("softmax_ce", nll.mean(), (logits,), rule)


# ---------------------------------------------------------------------------
# straight-through nodes


def ste_round(x):
    """Round to nearest, ties to even; backward passes gradients unchanged."""

    def rule(g):
        return (g,)

    return _make("ste_round", _round_array(x.value), (x,), rule)


def ste_relu(x):
    """max(x, 0) whose backward passes gradients unchanged."""

    def rule(g):
        return (g,)

    return _make("ste_relu", np.maximum(x.value, 0.0), (x,), rule)


def ste_clip(x, lo, hi):
    """clip(x, lo, hi) whose backward passes gradients unchanged."""
    if lo > hi:
        raise ValueError(f"invalid clip range [{lo}, {hi}]")

    def rule(g):
        return (g,)

    return _make("ste_clip", np.clip(x.value, lo, hi), (x,), rule)


def masked_clip(x, lo, hi):
    """clip(x, lo, hi) whose backward gates gradients to lo <= x <= hi."""
    if lo > hi:
        raise ValueError(f"invalid clip range [{lo}, {hi}]")
    inside = (x.value >= lo) & (x.value <= hi)

    def rule(g):
        return (g * inside,)

    return _make("masked_clip", np.clip(x.value, lo, hi), (x,), rule)


def zero_grad_sign(x):
    """Element-wise sign treated as a constant by backward."""
    return TensorNode(x.tape, np.sign(x.value), False, "sign", (x,), None)


def stop_gradient(x):
    """Identity in the forward pass; blocks all gradient flow."""
    return TensorNode(x.tape, x.value.copy(), False, "stop_gradient", (x,), None)
