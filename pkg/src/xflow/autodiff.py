"""Reverse-mode automatic differentiation over the tensor kernels.

Computation is define-by-run: every differentiable op returns a :class:`Var`
that remembers its parents and a closure mapping the output gradient to
parent gradients. :func:`backward` walks the recorded graph in reverse
topological order and accumulates into :class:`Parameter` gradients.
"""
import contextlib
import inspect

import numpy as np

from xflow import tensor as T
from xflow.errors import ContractError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward closures."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    __slots__ = ("value", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="", requires_grad=False):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Var):
    """A learnable leaf. ``grad`` accumulates across backward calls until :meth:`zero_grad`."""

    __slots__ = ("name", "_grad")

    def __init__(self, value, name=""):
        super().__init__(np.ascontiguousarray(value, dtype=np.float64), op="param", requires_grad=True)
        self.name = name
        self._grad = None

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = g

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(x):
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64), op="const")


def _node(value, parents, backward_fn, op):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Var(value, tuple(parents), backward_fn, op, True)
    return Var(value, op=op)


def topological_order(root):
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order, seen = [], set()
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`."""
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            if node._grad is None:
                node._grad = np.array(g, dtype=np.float64)
            else:
                node._grad += g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def scale(a, alpha):
    alpha = float(alpha)
    return _node(a.value * alpha, (a,), lambda g: (g * alpha,), "scale")


def add_n(items):
    """Sum of same-shaped Vars."""
    items = list(items)
    for v in items[1:]:
        if v.shape != items[0].shape:
            raise ContractError(f"add_n shape mismatch: {items[0].shape} vs {v.shape}")
    if len(items) == 1:
        return items[0]
    total = items[0].value.copy()
    for v in items[1:]:
        total += v.value
    return _node(total, tuple(items), lambda g: (g,) * len(items), "add_n")


def relu(x):
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def _channel_view(a, ndim):
    # per-channel slopes live on axis 1 for [N, C, ...] inputs
    return a.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x, slope):
    """max(0, x) + slope * min(0, x); slope is per channel (axis 1).

    At x == 0 the input gradient takes the negative-slope branch.
    """
    xv = x.value
    a = _channel_view(slope.value, xv.ndim)
    pos = xv > 0
    neg_part = np.where(pos, 0.0, xv)
    out = np.where(pos, xv, a * xv)
    red = tuple(i for i in range(xv.ndim) if i != 1)

    def bw(g):
        return g * np.where(pos, 1.0, a), (g * neg_part).sum(axis=red)

    return _node(out, (x, slope), bw, "prelu")


def sigmoid(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x):
    t = np.tanh(x.value)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _node(np.array(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x):
    n = x.value.size
    shape = x.shape
    return _node(np.array(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


# ---------------------------------------------------------------- structural

def concat(parts, axis=1):
    parts = [constant(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    out = T.concat([p.value for p in parts], axis)
    sizes = [p.shape[axis] for p in parts]
    return _node(out, tuple(parts), lambda g: tuple(T.split(g, sizes, axis)), "concat")


def split(x, sizes, axis=1):
    """Split into parts along ``axis``; each part is an independent node."""
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != x.shape[axis]:
        raise ContractError(f"sizes {sizes} do not sum to axis length {x.shape[axis]}")
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        index = [slice(None)] * x.value.ndim
        index[axis] = slice(lo, hi)
        index = tuple(index)

        def bw(g, index=index):
            full = np.zeros_like(x.value)
            full[index] = g
            return (full,)

        parts.append(_node(np.ascontiguousarray(x.value[index]), (x,), bw, "split"))
    return parts


def reshape(x, shape):
    old = x.shape
    out = T.reshape(x.value, shape)
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x):
    """Flatten all but the leading batch axis."""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def scatter_rows(x, rows, n_rows):
    """Place row i of x [M, ...] at row ``rows[i]`` of a zero tensor with ``n_rows`` rows."""
    rows = np.asarray(rows, dtype=np.intp)
    if rows.shape != (x.shape[0],) or (rows.size and (rows.min() < 0 or rows.max() >= n_rows)):
        raise ContractError(f"row targets {rows.shape} invalid for input {x.shape} into {n_rows} rows")
    if np.unique(rows).size != rows.size:
        raise ContractError("scatter_rows targets must be distinct")
    out = np.zeros((n_rows,) + x.shape[1:])
    out[rows] = x.value
    return _node(out, (x,), lambda g: (g[rows],), "scatter_rows")


# ---------------------------------------------------------------- linear maps

def linear(x, w):
    """x @ w.T for x [N, n], w [m, n]."""
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ContractError(f"cannot apply weights {wv.shape} to input {xv.shape}")
    return _node(xv @ wv.T, (x, w), lambda g: (g @ wv, g.T @ xv), "linear")


def affine(x, w, b):
    """x @ w.T + b, row-wise over a batch [N, n]."""
    xv, wv = x.value, w.value
    if xv.ndim != 2:
        raise ContractError(f"affine expects a batch [N, n], got {xv.shape}")
    out = T.affine(xv, wv, b.value)
    return _node(out, (x, w, b), lambda g: (g @ wv, g.T @ xv, g.sum(axis=0)), "affine")


def conv2d(x, kernels, bias, padding="same"):
    """Batched stride-1 convolution of [N, Ci, H, W]."""
    xv, kv = x.value, kernels.value
    if xv.ndim != 4:
        raise ContractError(f"conv2d expects [N, C, H, W], got {xv.shape}")
    kh, kw = kv.shape[2:]
    if padding == "same":
        (t, bt), (l, r) = T.same_padding(kh), T.same_padding(kw)
        xp = np.pad(xv, ((0, 0), (0, 0), (t, bt), (l, r))) if kh > 1 or kw > 1 else xv
    elif padding == "valid":
        t = l = 0
        xp = xv
    else:
        raise ContractError(f"unknown padding {padding!r}")
    out = T.correlate(xp, kv) + bias.value[:, None, None]
    h, w = xv.shape[2:]

    def bw(g):
        gx = T.correlate_transpose(g, kv)[:, :, t:t + h, l:l + w]
        gk = T.correlate_weight_grad(xp, g, kh, kw)
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _node(out, (x, kernels, bias), bw, "conv2d")


def deconv2d(x, kernels, bias):
    """Batched full transposed convolution; ``kernels`` is [C_out, C_in, kh, kw]."""
    xv = x.value
    if xv.ndim != 4 or kernels.value.shape[1] != xv.shape[1]:
        raise ContractError(f"deconv2d: kernels {kernels.shape} incompatible with input {xv.shape}")
    kc = np.ascontiguousarray(kernels.value.transpose(1, 0, 2, 3))
    kh, kw = kc.shape[2:]
    out = T.correlate_transpose(xv, kc) + bias.value[:, None, None]

    def bw(g):
        gx = T.correlate(g, kc)
        gk = T.correlate_weight_grad(g, xv, kh, kw).transpose(1, 0, 2, 3)
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _node(out, (x, kernels, bias), bw, "deconv2d")


def maxpool2d(x):
    out, idx = T.maxpool2d(x.value)
    return _node(out, (x,), lambda g: (T.maxpool2d_backward(g, idx),), "maxpool2d")


# ---------------------------------------------------------------- normalisation / losses

def batchnorm(x, gamma, beta, eps, running=None):
    """Batch normalisation over the batch (and spatial) axes, per feature/channel.

    With ``running=None`` batch statistics are used and the gradient flows
    through them; returns ``(out, batch_mean, batch_var)``. With
    ``running=(mean, var)`` the frozen statistics are used instead.
    """
    xv = x.value
    axes = (0,) if xv.ndim == 2 else (0, 2, 3)
    view = (1, -1) if xv.ndim == 2 else (1, -1, 1, 1)
    g_ = gamma.value.reshape(view)
    if running is None:
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
    else:
        mu, var = running
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu.reshape(view)) * inv_std.reshape(view)
    out = g_ * xhat + beta.value.reshape(view)
    m = xv.size // xv.shape[1]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if running is None:
            dx = (inv_std.reshape(view) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(view)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(view)
            )
        else:
            dx = dxhat * inv_std.reshape(view)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), bw, "batchnorm"), mu, var


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch. Returns (loss Var, probabilities array)."""
    lv = logits.value
    labels = np.asarray(labels, dtype=np.intp)
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise ContractError(f"logits {lv.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= lv.shape[1]):
        raise ContractError(f"label out of range for {lv.shape[1]} classes")
    logp = log_softmax(lv)
    probs = np.exp(logp)
    n = lv.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g) / n),)

    return _node(np.array(loss), (logits,), bw, "softmax_xent"), probs


# ---------------------------------------------------------------- graphs and checking

class Graph:
    """A named-input computation evaluated define-by-run.

    ``fn`` takes Vars as keyword arguments and returns the output Var. After
    :meth:`forward`, :attr:`nodes` holds the recorded nodes in topological order.
    """

    def __init__(self, fn, inputs=None):
        self.fn = fn
        self.inputs = list(inputs) if inputs is not None else list(inspect.signature(fn).parameters)
        self.output = None

    def forward(self, bindings):
        missing = [name for name in self.inputs if name not in bindings]
        if missing:
            raise ContractError(f"unbound graph inputs: {missing}")
        args = {name: constant(bindings[name]) for name in self.inputs}
        self.output = self.fn(**args)
        return self.output.value

    @property
    def nodes(self):
        return topological_order(self.output) if self.output is not None else []

    def backward(self):
        if self.output is None:
            raise ContractError("forward has not run")
        backward(self.output)


def grad_check_detail(loss_fn, params, eps=1e-5, max_coords=None, seed=0, floor=1e-8):
    """Per-parameter worst relative error between backprop and central differences.

    ``loss_fn()`` must be deterministic and return a scalar Var. ``max_coords``
    caps the number of (seeded, randomly chosen) coordinates per parameter;
    ``None`` checks every coordinate. ``floor`` bounds the denominator from
    below, so gradients that are structurally zero are compared against the
    finite-difference noise level (about 1e-16 * |loss| / eps) rather than 0.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    report = {}
    for k, (p, a) in enumerate(zip(params, analytic)):
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn().value)
            flat[i] = orig - eps
            fm = float(loss_fn().value)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        report[getattr(p, "name", "") or f"param{k}"] = worst
    for p in params:
        p.zero_grad()
    return report


def grad_check(loss_fn, params, eps=1e-5, max_coords=None, seed=0, floor=1e-8):
    """Worst relative error |a - n| / max(|a|, |n|, floor) over all checked coordinates."""
    report = grad_check_detail(loss_fn, params, eps, max_coords, seed, floor)
    return max(report.values(), default=0.0)
