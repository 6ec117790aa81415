"""Layers: dense, conv, deconv, pooling, batch norm, dropout, (P)ReLU, LSTM.

All layers consume and produce batched :class:`~xflow.autodiff.Var` values
(leading batch axis). Weight init is Glorot/Xavier uniform.
"""
import numpy as np

from xflow import autodiff as ad
from xflow.autodiff import Parameter
from xflow.errors import ContractError

ACTIVATIONS = ("relu", "prelu", "linear")


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Base class: parameters/buffers are discovered from attributes in definition order."""

    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    buffer_names = ()

    def named_buffers(self, prefix=""):
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class PReLU(Module):
    """Parametric ReLU with one learnable slope per channel (2D) or feature (1D)."""

    def __init__(self, num, init=0.25):
        self.slope = Parameter(np.full(num, init))

    def forward(self, x):
        if x.shape[1] != self.slope.shape[0]:
            raise ContractError(f"PReLU has {self.slope.shape[0]} slopes, input has {x.shape[1]} channels")
        return ad.prelu(x, self.slope)


def _activation(kind, num):
    if kind not in ACTIVATIONS:
        raise ContractError(f"unknown activation {kind!r}")
    return PReLU(num) if kind == "prelu" else None


def _apply(kind, act, x):
    if kind == "relu":
        return ad.relu(x)
    if kind == "prelu":
        return act(x)
    return x


def _check_splits(splits, total):
    if splits is not None and sum(splits) != total:
        raise ContractError(f"input blocks {splits} do not sum to {total}")
    return None if splits is None or len(splits) < 2 else tuple(splits)


def blocked_affine(x, w, b, splits=None):
    """affine(x, w, b) accumulated over input blocks of the given sizes.

    The leading block is computed exactly as an unblocked layer of that width
    would compute it, so all-zero trailing blocks leave the result bit-identical.
    """
    if splits is None:
        return ad.affine(x, w, b)
    xs, ws = ad.split(x, splits, axis=1), ad.split(w, splits, axis=1)
    out = ad.affine(xs[0], ws[0], b)
    for xi, wi in zip(xs[1:], ws[1:]):
        out = ad.add(out, ad.linear(xi, wi))
    return out


class Dense(Module):
    """Fully-connected layer. ``splits`` optionally names input block sizes (see :func:`blocked_affine`)."""

    def __init__(self, n_in, n_out, rng, activation="relu", splits=None):
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.splits = _check_splits(splits, n_in)
        self.W = Parameter(glorot_uniform(rng, (n_out, n_in), n_in, n_out))
        self.b = Parameter(np.zeros(n_out))
        self.act = _activation(activation, n_out)

    def forward(self, x):
        if x.shape[1:] != (self.n_in,):
            raise ContractError(f"Dense expects [N, {self.n_in}], got {x.shape}")
        return _apply(self.activation, self.act, blocked_affine(x, self.W, self.b, self.splits))


class Conv2D(Module):
    """Stride-1 convolution. ``splits`` optionally names input channel block sizes."""

    def __init__(self, c_in, c_out, kernel, rng, activation="relu", padding="same", splits=None):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.c_in, self.c_out, self.padding, self.activation = c_in, c_out, padding, activation
        self.splits = _check_splits(splits, c_in)
        self.K = Parameter(glorot_uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw, c_out * kh * kw))
        self.b = Parameter(np.zeros(c_out))
        self.act = _activation(activation, c_out)

    def forward(self, x):
        if x.value.ndim != 4 or x.shape[1] != self.c_in:
            raise ContractError(f"Conv2D expects [N, {self.c_in}, H, W], got {x.shape}")
        if self.splits is None:
            z = ad.conv2d(x, self.K, self.b, self.padding)
        else:
            xs, ks = ad.split(x, self.splits, axis=1), ad.split(self.K, self.splits, axis=1)
            z = ad.conv2d(xs[0], ks[0], self.b, self.padding)
            zero_bias = ad.constant(np.zeros(self.c_out))
            for xi, ki in zip(xs[1:], ks[1:]):
                z = ad.add(z, ad.conv2d(xi, ki, zero_bias, self.padding))
        return _apply(self.activation, self.act, z)


class Deconv2D(Module):
    def __init__(self, c_in, c_out, kernel, rng, activation="relu"):
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.c_in, self.c_out, self.activation = c_in, c_out, activation
        self.K = Parameter(glorot_uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw, c_out * kh * kw))
        self.b = Parameter(np.zeros(c_out))
        self.act = _activation(activation, c_out)

    def forward(self, x):
        if x.value.ndim != 4 or x.shape[1] != self.c_in:
            raise ContractError(f"Deconv2D expects [N, {self.c_in}, h, w], got {x.shape}")
        return _apply(self.activation, self.act, ad.deconv2d(x, self.K, self.b))


class MaxPool2D(Module):
    def forward(self, x):
        return ad.maxpool2d(x)


class BatchNorm(Module):
    """Per-feature (1D) or per-channel (2D) batch normalisation.

    Training mode normalises with batch statistics and updates the running
    estimates; evaluation mode uses the running estimates only.
    """

    buffer_names = ("running_mean", "running_var")

    def __init__(self, num, eps=1e-3, momentum=0.99):
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(num))
        self.beta = Parameter(np.zeros(num))
        self.running_mean = np.zeros(num)
        self.running_var = np.ones(num)

    def forward(self, x):
        if x.value.ndim not in (2, 4) or x.shape[1] != self.gamma.shape[0]:
            raise ContractError(f"BatchNorm({self.gamma.shape[0]}) got input {x.shape}")
        if not self.training:
            return ad.batchnorm(x, self.gamma, self.beta, self.eps, (self.running_mean, self.running_var))[0]
        if x.shape[0] < 2:
            raise ContractError("batch norm in training mode needs a batch of at least 2")
        out, mu, var = ad.batchnorm(x, self.gamma, self.beta, self.eps)
        m = self.momentum
        self.running_mean = m * self.running_mean + (1 - m) * mu
        self.running_var = m * self.running_var + (1 - m) * var
        return out


class Dropout(Module):
    """Inverted dropout: survivors are scaled by 1/(1-p); identity in evaluation mode."""

    def __init__(self, p, rng):
        if not 0 <= p < 1:
            raise ContractError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x):
        if not self.training or self.p == 0:
            return x
        keep = self.rng.random(x.shape) >= self.p
        return ad.mul(x, keep / (1.0 - self.p))


class LSTM(Module):
    """Single-layer LSTM with zero initial state.

    Gates are stacked [input, forget, candidate, output] in ``W`` (input
    weights), ``U`` (recurrent weights) and ``b``. ``output="last"`` returns
    the hidden state at each sequence's final valid step; ``"mean"`` averages
    the hidden states over valid steps.
    """

    def __init__(self, d_in, hidden, rng, forget_bias=1.0, output="last", splits=None):
        if output not in ("last", "mean"):
            raise ContractError(f"unknown LSTM output mode {output!r}")
        self.d_in, self.hidden, self.output = d_in, hidden, output
        self.splits = _check_splits(splits, d_in)
        self.W = Parameter(glorot_uniform(rng, (4 * hidden, d_in), d_in, 4 * hidden))
        self.U = Parameter(glorot_uniform(rng, (4 * hidden, hidden), hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        self.b = Parameter(b)

    def forward(self, seq, lengths=None):
        """seq: [N, T, d]; lengths: per-example valid steps (default all T)."""
        n, steps, d = seq.shape
        if d != self.d_in:
            raise ContractError(f"LSTM expects feature size {self.d_in}, got {d}")
        if steps < 1:
            raise ContractError("LSTM needs a nonempty sequence")
        lengths = np.full(n, steps) if lengths is None else np.asarray(lengths)
        if lengths.min() < 1 or lengths.max() > steps:
            raise ContractError(f"sequence lengths {lengths} outside [1, {steps}]")
        hd = self.hidden
        xw = blocked_affine(ad.reshape(seq, (n * steps, d)), self.W, self.b, self.splits)
        xw_steps = ad.split(ad.reshape(xw, (n, steps * 4 * hd)), [4 * hd] * steps, axis=1)
        h = ad.constant(np.zeros((n, hd)))
        c = ad.constant(np.zeros((n, hd)))
        ragged = bool(np.any(lengths != steps))
        pooled = []
        for t in range(steps):
            z = ad.add(xw_steps[t], ad.linear(h, self.U))
            zi, zf, zg, zo = ad.split(z, [hd] * 4, axis=1)
            c_new = ad.add(ad.mul(ad.sigmoid(zf), c), ad.mul(ad.sigmoid(zi), ad.tanh(zg)))
            h_new = ad.mul(ad.sigmoid(zo), ad.tanh(c_new))
            if ragged:
                live = (t < lengths).astype(float)[:, None]
                c = ad.add(ad.mul(c_new, live), ad.mul(c, 1.0 - live))
                h = ad.add(ad.mul(h_new, live), ad.mul(h, 1.0 - live))
                if self.output == "mean":
                    pooled.append(ad.mul(h_new, live / lengths[:, None]))
            else:
                c, h = c_new, h_new
                if self.output == "mean":
                    pooled.append(ad.scale(h_new, 1.0 / steps))
        return ad.add_n(pooled) if self.output == "mean" else h


def softmax_cross_entropy(logits, label):
    """Single-example loss: returns (-log p[label], probabilities) for logits of shape [C]."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ContractError(f"expected logits [C], got {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise ContractError(f"label {label} out of range for {logits.shape[0]} classes")
    loss, probs = ad.softmax_cross_entropy(ad.constant(logits[None]), [label])
    return float(loss.value), probs[0]
