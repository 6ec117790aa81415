"""Dense float64 array kernels.

Tensors are plain C-contiguous ``numpy.ndarray`` values of dtype float64.
Image-like kernels accept a single sample ``[C, H, W]`` or a batch
``[N, C, H, W]`` and return the matching rank. Convolution is
cross-correlation (no kernel flip) with stride 1.
"""
import numpy as np

from xflow import _backend
from xflow.errors import ContractError

__all__ = [
    "ContractError",
    "as_tensor",
    "conv2d",
    "deconv2d",
    "correlate",
    "correlate_transpose",
    "correlate_weight_grad",
    "same_padding",
    "maxpool2d",
    "maxpool2d_backward",
    "affine",
    "concat",
    "split",
    "reshape",
    "flatten",
    "add",
    "mul",
    "scale",
    "squared_l2_diff",
]


def as_tensor(x):
    """Return ``x`` as a C-contiguous float64 array, enforcing rank >= 1 and positive dims."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise ContractError("rank-0 tensors are not allowed")
    arr = np.ascontiguousarray(arr)
    if any(d < 1 for d in arr.shape):
        raise ContractError(f"every dimension must be >= 1, got shape {arr.shape}")
    return arr


def _batched(x, rank):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ContractError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


def same_padding(k):
    """(low, high) zero padding that keeps the size under a k-wide window; odd extra goes high."""
    low = (k - 1) // 2
    return low, k - 1 - low


def correlate(x, kernels):
    """Batched valid cross-correlation: [N,Ci,H,W] * [Co,Ci,kh,kw] -> [N,Co,H-kh+1,W-kw+1]."""
    n, ci, h, w = x.shape
    co, kci, kh, kw = kernels.shape
    if ci != kci:
        raise ContractError(f"input has {ci} channels but kernels expect {kci}")
    if kh > h or kw > w:
        raise ContractError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    cols = _backend.im2col(x, kh, kw)
    out = np.matmul(kernels.reshape(co, -1), cols)
    return out.reshape(n, co, h - kh + 1, w - kw + 1)


def correlate_transpose(g, kernels):
    """Adjoint of :func:`correlate`: [N,Co,h,w] -> [N,Ci,h+kh-1,w+kw-1] (full transposed conv)."""
    n, co, h, w = g.shape
    kco, ci, kh, kw = kernels.shape
    if co != kco:
        raise ContractError(f"gradient has {co} channels but kernels produce {kco}")
    cols = np.matmul(kernels.reshape(co, -1).T, g.reshape(n, co, h * w))
    return _backend.col2im(np.ascontiguousarray(cols), ci, h + kh - 1, w + kw - 1, kh, kw)


def correlate_weight_grad(x, g, kh, kw):
    """d<correlate(x, K), g>/dK for a batch: returns [Co, Ci, kh, kw]."""
    n, ci = x.shape[:2]
    co = g.shape[1]
    cols = _backend.im2col(x, kh, kw)
    dk = np.tensordot(g.reshape(n, co, -1), cols, axes=([0, 2], [0, 2]))
    return dk.reshape(co, ci, kh, kw)


def _pad(x, kh, kw):
    (t, b), (l, r) = same_padding(kh), same_padding(kw)
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))


def conv2d(input, kernels, bias, padding="same"):
    """Stride-1 2D cross-correlation plus per-channel bias.

    ``padding="same"`` zero-pads so the output keeps the input's H x W;
    ``padding="valid"`` shrinks it to (H-kh+1) x (W-kw+1).
    """
    x, single = _batched(input, 3)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if kernels.ndim != 4:
        raise ContractError(f"kernels must be [C_out, C_in, kh, kw], got {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ContractError(f"bias shape {bias.shape} does not match {kernels.shape[0]} kernels")
    if padding == "same":
        x = _pad(x, kernels.shape[2], kernels.shape[3])
    elif padding != "valid":
        raise ContractError(f"unknown padding {padding!r}")
    out = correlate(x, kernels) + bias[:, None, None]
    return out[0] if single else out


def deconv2d(input, kernels, bias):
    """Stride-1 full transposed convolution.

    ``kernels`` is laid out ``[C_out, C_in, kh, kw]`` and
    ``out[o, y, x] = sum_{c,i,j} input[c, y-i, x-j] * kernels[o, c, i, j] + bias[o]``,
    so an h x w input grows to (h+kh-1) x (w+kw-1).
    """
    x, single = _batched(input, 3)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if kernels.ndim != 4 or kernels.shape[1] != x.shape[1]:
        raise ContractError(f"kernels {kernels.shape} incompatible with input channels {x.shape[1]}")
    if bias.shape != (kernels.shape[0],):
        raise ContractError(f"bias shape {bias.shape} does not match {kernels.shape[0]} kernels")
    out = correlate_transpose(x, np.ascontiguousarray(kernels.transpose(1, 0, 2, 3)))
    out += bias[:, None, None]
    return out[0] if single else out


def maxpool2d(input):
    """2x2 max pool with stride 2. Returns (pooled, argmax) where argmax in {0..3} is row-major in the window."""
    x, single = _batched(input, 3)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ContractError(f"max pool needs even H and W, got {x.shape[2]}x{x.shape[3]}")
    out, idx = _backend.maxpool2x2(x)
    return (out[0], idx[0]) if single else (out, idx)


def maxpool2d_backward(grad, idx):
    g, single = _batched(grad, 3)
    idx = np.ascontiguousarray(idx, dtype=np.int8)
    if idx.ndim == 3:
        idx = idx[None]
    if idx.shape != g.shape:
        raise ContractError(f"argmax map {idx.shape} does not match gradient {g.shape}")
    out = _backend.maxpool2x2_backward(g, idx)
    return out[0] if single else out


def affine(input, weights, bias):
    """``weights @ x + bias`` for x of shape [n], or row-wise for a batch [N, n]."""
    x = np.asarray(input, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or x.ndim not in (1, 2):
        raise ContractError(f"cannot apply weights {weights.shape} to input {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise ContractError(f"bias shape {bias.shape} does not match weights {weights.shape}")
    return x @ weights.T + bias


def concat(parts, axis=0):
    parts = [np.asarray(p, dtype=np.float64) for p in parts]
    if not parts:
        raise ContractError("concat needs at least one part")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref):
            raise ContractError(f"rank mismatch in concat: {ref} vs {p.shape}")
        ax = axis % len(ref)
        if p.shape[:ax] + p.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ContractError(f"non-axis dimensions differ in concat: {ref} vs {p.shape}")
    return np.concatenate(parts, axis=axis)


def split(x, sizes, axis=0):
    """Inverse of :func:`concat` given the part sizes along ``axis``."""
    if sum(sizes) != x.shape[axis]:
        raise ContractError(f"sizes {sizes} do not sum to axis length {x.shape[axis]}")
    return np.split(x, np.cumsum(sizes)[:-1], axis=axis)


def reshape(input, new_shape):
    x = np.asarray(input, dtype=np.float64)
    new_shape = tuple(int(d) for d in new_shape)
    if int(np.prod(new_shape)) != x.size or any(d < 1 for d in new_shape):
        raise ContractError(f"cannot reshape {x.shape} ({x.size} elements) to {new_shape}")
    return x.reshape(new_shape)


def flatten(input):
    return np.asarray(input, dtype=np.float64).reshape(-1)


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = _same_shape(a, b)
    return a + b


def mul(a, b):
    a, b = _same_shape(a, b)
    return a * b


def scale(a, alpha):
    return np.asarray(a, dtype=np.float64) * float(alpha)


def squared_l2_diff(a, b):
    """sum_i (a_i - b_i)^2"""
    a, b = _same_shape(a, b)
    d = (a - b).ravel()
    return float(d @ d)
