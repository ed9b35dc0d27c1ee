"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

Provides the handful of layer primitives the correspondence-filtering
network needs: shared linear maps, context normalization, batch
normalization, elementwise activations, axis reductions, soft
thresholding, and an Adam optimizer.  Everything is numpy-backed and
64-bit; gradients are exact up to floating point and are verified
against central finite differences in the test suite.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

__all__ = [
    "DiffcoreError",
    "ShapeError",
    "NumericError",
    "ContractError",
    "DegenerateContextError",
    "SoftThresholdKind",
    "Tensor",
    "Parameter",
    "from_op",
    "add",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "concat_rows",
    "linear_map",
    "relu",
    "tanh",
    "sigmoid",
    "abs_",
    "softplus",
    "sum_all",
    "mean_axis",
    "softmax_axis",
    "soft_threshold",
    "context_normalize",
    "BatchNorm",
    "Adam",
]

CN_EPS = 1e-5
BN_EPS = 1e-5


class DiffcoreError(Exception):
    """Base class for computation-substrate errors."""


class ShapeError(DiffcoreError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericError(DiffcoreError):
    """A NaN or Inf appeared in data or gradients."""


class ContractError(DiffcoreError):
    """A value precondition (e.g. nonnegative threshold) was violated."""


class DegenerateContextError(DiffcoreError):
    """Context normalization applied to fewer than two points."""


class SoftThresholdKind(Enum):
    LINEAR = "linear"
    QUADRATIC = "quadratic"

    @classmethod
    def from_string(cls, s):
        try:
            return cls(s.lower())
        except ValueError:
            raise ContractError(f"unknown soft-threshold kind: {s!r}") from None


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode AD.

    Leaf tensors created with ``requires_grad=True`` (and all
    :class:`Parameter` instances) receive accumulated gradients in
    ``.grad`` when ``backward`` is called on a scalar loss downstream.
    """

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"

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
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._bad_item()

    def _bad_item(self):
        raise ShapeError("item() requires a scalar tensor")

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be a finite scalar.  Repeated calls accumulate.
        """
        if self.size != 1:
            raise ShapeError("backward requires a scalar loss")
        topo = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(
                        f"non-finite gradient produced by op '{node._op}'"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"


class Parameter(Tensor):
    """A named trainable leaf; ``.grad`` starts at zero and accumulates."""

    def __init__(self, value, name=""):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def from_op(data, parents, vjp, op):
    """Create a graph node from precomputed forward data and a VJP closure.

    ``vjp(out_grad)`` must return one gradient (or None) per parent.
    This is the extension point for custom differentiable operations.
    """
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    req = any(p.requires_grad for p in parents)
    out.requires_grad = req
    out._parents = tuple(parents) if req else ()
    out._vjp = vjp if req else None
    out._op = op
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return from_op(a.data + b.data, (a, b), vjp, "add")


def neg(a):
    a = _wrap(a)
    return from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return from_op(a.data * b.data, (a, b), vjp, "mul")


def div(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return from_op(a.data / b.data, (a, b), vjp, "div")


def pow_scalar(a, p):
    a = _wrap(a)
    p = float(p)

    def vjp(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return from_op(np.power(a.data, p), (a,), vjp, "pow")


# -- linear algebra ------------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return from_op(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a):
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return from_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    a = _wrap(a)
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return from_op(a.data.reshape(shape), (a,), vjp, "reshape")


def concat_rows(a, b):
    """Stack two 2-D tensors along axis 0."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cannot concatenate rows of {a.shape} and {b.shape}")
    k = a.shape[0]

    def vjp(g):
        return g[:k], g[k:]

    return from_op(np.concatenate([a.data, b.data], axis=0), (a, b), vjp, "concat_rows")


def linear_map(x, W, b):
    """Shared per-point linear map: ``out[c, n] = sum_k W[c, k] x[k, n] + b[c]``."""
    x, W, b = _wrap(x), _wrap(W), _wrap(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ShapeError("linear_map expects x:(C_in,N), W:(C_out,C_in), b:(C_out,)")
    if W.shape[1] != x.shape[0] or b.shape[0] != W.shape[0]:
        raise ShapeError(
            f"linear_map shapes disagree: x{x.shape}, W{W.shape}, b{b.shape}"
        )
    return add(matmul(W, x), reshape(b, (b.shape[0], 1)))


# -- activations ---------------------------------------------------------


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return from_op(np.where(mask, a.data, 0.0), (a,), vjp, "relu")


def tanh(a):
    a = _wrap(a)
    t = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - t * t),)

    return from_op(t, (a,), vjp, "tanh")


def sigmoid(a):
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * s * (1.0 - s),)

    return from_op(s, (a,), vjp, "sigmoid")


def abs_(a):
    """Elementwise absolute value; subgradient 0 at 0."""
    a = _wrap(a)
    sgn = np.sign(a.data)

    def vjp(g):
        return (g * sgn,)

    return from_op(np.abs(a.data), (a,), vjp, "abs")


def softplus(a):
    """Numerically stable log(1 + exp(x))."""
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * s,)

    return from_op(np.logaddexp(0.0, a.data), (a,), vjp, "softplus")


# -- reductions ----------------------------------------------------------


def sum_all(a):
    a = _wrap(a)

    def vjp(g):
        return (np.full(a.shape, float(g)),)

    return from_op(a.data.sum(), (a,), vjp, "sum")


def mean_axis(a, axis):
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    n = a.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")

    def vjp(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return from_op(a.data.mean(axis=axis), (a,), vjp, "mean_axis")


def softmax_axis(a, axis):
    a = _wrap(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return from_op(s, (a,), vjp, "softmax_axis")


# -- soft thresholding ---------------------------------------------------


def soft_threshold(x, t, kind=SoftThresholdKind.LINEAR):
    """Shrinkage with per-channel threshold ``t`` (broadcast against ``x``).

    Linear: ``sign(x) * max(|x| - t, 0)``.  Quadratic: the linear output
    additionally scaled by ``(1 + max(|x| - t, 0))``, which amplifies
    surviving large-magnitude entries while keeping the dead zone.
    """
    x, t = _wrap(x), _wrap(t)
    if np.any(t.data < 0):
        raise ContractError("soft_threshold requires a nonnegative threshold")
    sgn = np.sign(x.data)
    # a (C,) threshold broadcasts per channel, i.e. along trailing axes of x
    tb_shape = t.shape + (1,) * (x.ndim - t.ndim)
    tb = t.data.reshape(tb_shape)
    u = np.maximum(np.abs(x.data) - tb, 0.0)
    mask = u > 0
    if kind == SoftThresholdKind.LINEAR:
        out = sgn * u
        dout_du = np.ones_like(u)
    elif kind == SoftThresholdKind.QUADRATIC:
        out = sgn * u * (1.0 + u)
        dout_du = 1.0 + 2.0 * u
    else:
        raise ContractError(f"unknown soft-threshold kind: {kind!r}")

    def vjp(g):
        gu = g * dout_du * mask
        gx = gu  # sign(x) from d|x|/dx cancels the sign(x) in the output
        gt = _unbroadcast(-(gu * sgn), tb_shape).reshape(t.shape)
        return gx, gt

    return from_op(out, (x, t), vjp, "soft_threshold")


# -- normalizations ------------------------------------------------------


def _standardize_vjp(g, xhat, inv, axis):
    return inv * (
        g
        - g.mean(axis=axis, keepdims=True)
        - xhat * (g * xhat).mean(axis=axis, keepdims=True)
    )


def context_normalize(f):
    """Zero-mean, unit-variance per channel across the point axis.

    ``f`` is (C, N) with N >= 2; normalization uses the biased variance
    plus an epsilon guard, so constant channels map to zero.
    """
    f = _wrap(f)
    if f.ndim != 2:
        raise ShapeError("context_normalize expects a (C, N) tensor")
    if f.shape[1] < 2:
        raise DegenerateContextError(
            f"context normalization needs at least 2 points, got {f.shape[1]}"
        )
    # reduce over sorted, contiguous values so the statistics (and hence
    # the output) are bitwise invariant to column permutations
    xd = np.ascontiguousarray(f.data)
    mu = np.sort(xd, axis=1).mean(axis=1, keepdims=True)
    var = np.ascontiguousarray(np.sort((xd - mu) ** 2, axis=1)).mean(
        axis=1, keepdims=True
    )
    inv = 1.0 / np.sqrt(var + CN_EPS)
    xhat = (f.data - mu) * inv

    def vjp(g):
        return (_standardize_vjp(g, xhat, inv, axis=1),)

    return from_op(xhat, (f,), vjp, "context_normalize")


class BatchNorm:
    """Batch normalization over one axis with learned affine and running stats.

    ``channel_axis`` selects the per-feature axis of a 2-D input; the
    other axis is the batch.  Train mode normalizes with batch statistics
    and updates running stats as ``m*old + (1-m)*batch``; eval mode uses
    the running stats (initialized to mean 0, variance 1).  The running
    variance is left untouched for single-element batches, where the
    sample variance carries no information.
    """

    def __init__(self, num_features, momentum=0.9, eps=BN_EPS, channel_axis=0,
                 name="bn"):
        self.num_features = int(num_features)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.channel_axis = int(channel_axis)
        self.gamma = Parameter(np.ones(num_features), f"{name}.gamma")
        self.beta = Parameter(np.zeros(num_features), f"{name}.beta")
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def _colshape(self):
        return (self.num_features, 1) if self.channel_axis == 0 else (1, self.num_features)

    def __call__(self, x, mode="train"):
        x = _wrap(x)
        if x.ndim != 2 or x.shape[self.channel_axis] != self.num_features:
            raise ShapeError(
                f"batch_norm expects axis {self.channel_axis} of size "
                f"{self.num_features}, got shape {x.shape}"
            )
        batch_axis = 1 - self.channel_axis
        n = x.shape[batch_axis]
        if n == 0:
            raise ShapeError("batch_norm over an empty batch")
        if mode not in ("train", "eval"):
            raise ContractError(f"unknown batch_norm mode: {mode!r}")
        cs = self._colshape()
        gamma = reshape(self.gamma, cs)
        beta = reshape(self.beta, cs)
        if mode == "eval":
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            scale = Tensor(inv.reshape(cs))
            shift = Tensor(self.running_mean.reshape(cs))
            return (x - shift) * scale * gamma + beta
        mu = x.data.mean(axis=batch_axis, keepdims=True)
        var = x.data.var(axis=batch_axis, keepdims=True)
        m = self.momentum
        self.running_mean = m * self.running_mean + (1.0 - m) * mu.reshape(-1)
        if n >= 2:
            self.running_var = m * self.running_var + (1.0 - m) * var.reshape(-1)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat_data = (x.data - mu) * inv

        def vjp(g):
            return (_standardize_vjp(g, xhat_data, inv, axis=batch_axis),)

        xhat = from_op(xhat_data, (x,), vjp, "batch_norm")
        return xhat * gamma + beta

    def named_parameters(self, prefix=""):
        yield f"{prefix}gamma", self.gamma
        yield f"{prefix}beta", self.beta


# -- optimizer -----------------------------------------------------------


class Adam:
    """Adam with bias correction; state per parameter, deterministic."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
