"""Cross-modal connections between a 2D (image) and a 1D (feature vector) stream.

Two pipelines carry data across the dimensionality gap:

* 2D -> 1D: 1x1 convolution (PReLU), flatten, dense (PReLU).
* 1D -> 2D: dense (PReLU) to (H-kh+1)*(W-kw+1) units, reshape to a
  single-channel map, kh x kw transposed convolution (PReLU) to [C, H, W].

Cross-connections read an intermediate representation of the source stream
and are concatenated onto the target; residual connections read the raw
source input and are added elementwise to the target.
"""
from dataclasses import dataclass, field

import numpy as np

from xflow import autodiff as ad
from xflow.errors import ContractError
from xflow.nn import Conv2D, Deconv2D, Dense, Module


def reshape_size(target_hw, kernel):
    """Spatial size the dense layer must produce so a stride-1 deconv lands on ``target_hw``."""
    (h, w), (kh, kw) = target_hw, kernel
    if not (1 <= kh <= h and 1 <= kw <= w):
        raise ContractError(f"deconv kernel {kernel} does not fit target {target_hw}")
    return h - kh + 1, w - kw + 1


class XConn2Dto1D(Module):
    kind = "cross"

    def __init__(self, in_shape, c_mid, n_out, rng):
        self.in_shape = tuple(in_shape)
        c, h, w = self.in_shape
        self.conv = Conv2D(c, c_mid, 1, rng, activation="prelu")
        self.fc = Dense(c_mid * h * w, n_out, rng, activation="prelu")

    @property
    def output_shape(self):
        return (self.fc.n_out,)

    def forward(self, x):
        if x.shape[1:] != self.in_shape:
            raise ContractError(f"{type(self).__name__} built for {self.in_shape}, got {x.shape[1:]}")
        return self.fc(ad.flatten(self.conv(x)))


class XConn1Dto2D(Module):
    kind = "cross"

    def __init__(self, n_in, out_shape, kernel, rng):
        self.n_in = n_in
        self.out_shape = tuple(out_shape)
        c_out, h, w = self.out_shape
        self.map_shape = (1,) + reshape_size((h, w), kernel)
        self.fc = Dense(n_in, self.map_shape[1] * self.map_shape[2], rng, activation="prelu")
        self.deconv = Deconv2D(1, c_out, kernel, rng, activation="prelu")

    @property
    def output_shape(self):
        return self.out_shape

    def forward(self, x):
        if x.shape[1:] != (self.n_in,):
            raise ContractError(f"{type(self).__name__} built for {self.n_in} inputs, got {x.shape[1:]}")
        grid = ad.reshape(self.fc(x), (x.shape[0],) + self.map_shape)
        return self.deconv(grid)


class ResConn2Dto1D(XConn2Dto1D):
    """Same pipeline as :class:`XConn2Dto1D`, fed by the raw image input."""

    kind = "residual"


class ResConn1Dto2D(XConn1Dto2D):
    """Same pipeline as :class:`XConn1Dto2D`, fed by the raw 1D input."""

    kind = "residual"


@dataclass
class MergePoint:
    """Where connection outputs join a stream.

    Residual outputs are summed into the target (shape-preserving); cross
    outputs are concatenated after it along ``axis`` (1 = channel axis for
    batched 2D, feature axis for batched 1D).
    """

    depth: int
    residuals: list = field(default_factory=list)
    xconns: list = field(default_factory=list)
    axis: int = 1

    @property
    def active(self):
        return bool(self.residuals or self.xconns)


def merge(target, residual_outputs=(), xconn_outputs=(), axis=1):
    """concat([target + sum(residuals)] + xconns, axis)."""
    residual_outputs, xconn_outputs = list(residual_outputs), list(xconn_outputs)
    for r in residual_outputs:
        if r.shape != target.shape:
            raise ContractError(f"residual output {r.shape} does not match merge target {target.shape}")
    out = ad.add_n([target] + residual_outputs) if residual_outputs else target
    if xconn_outputs:
        out = ad.concat([out] + xconn_outputs, axis=axis)
    return out


def _single(conn, x):
    with ad.no_grad():
        return conn(ad.constant(np.asarray(x, dtype=np.float64)[None])).value[0]


def apply_xconn_2d_to_1d(h_d, conn):
    """Run a 2D->1D connection on one sample [C, H, W] -> [n_out]."""
    return _single(conn, h_d)


def apply_xconn_1d_to_2d(h_d, conn):
    """Run a 1D->2D connection on one sample [n] -> [C_out, H, W]."""
    return _single(conn, h_d)


def apply_residual(x_in, conn):
    """Run a residual connection on a raw stream input (image [C, H, W] or vector [n])."""
    return _single(conn, x_in)
