"""Deformable convolution with clamped offsets and the hint block built on it.

The offset predictor ``g`` is an ordinary convolution producing ``2*k*k``
channels laid out ``(row_0, col_0, row_1, col_1, ...)`` per kernel tap, taps
in row-major kernel order. Predicted offsets are clamped to
``[-k_D*H, k_D*H]`` (rows) and ``[-k_D*W, k_D*W]`` (columns) for an ``H x W``
feature map before sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2dLayer, ConvStack, Module, ShapeError, activation, prefixed


def clamp_bounds(k_d: float, height: int, width: int) -> tuple[float, float]:
    if k_d < 0:
        raise ValueError(f"offset bound k_D must be non-negative, got {k_d}")
    return k_d * height, k_d * width


def clamp_offsets(raw: np.ndarray, k_d: float, height: int, width: int) -> np.ndarray:
    """Clamp interleaved (row, col) offset channels to the ``k_D`` fraction of the map size."""
    bh, bw = clamp_bounds(k_d, height, width)
    out = np.array(raw, dtype=np.float64, copy=True)
    out[0::2] = np.clip(out[0::2], -bh, bh)
    out[1::2] = np.clip(out[1::2], -bw, bw)
    return out


def clamp_active(raw: np.ndarray, k_d: float, height: int, width: int) -> np.ndarray:
    """Derivative of :func:`clamp_offsets`: 1 inside the closed interval, 0 outside."""
    bh, bw = clamp_bounds(k_d, height, width)
    act = np.empty(raw.shape, dtype=np.float64)
    act[0::2] = np.abs(raw[0::2]) <= bh
    act[1::2] = np.abs(raw[1::2]) <= bw
    return act


def _corners(feature, py, px):
    c, h, w = feature.shape
    fy = np.floor(py)
    fx = np.floor(px)
    wy = py - fy
    wx = px - fx
    y0 = fy.astype(np.intp)
    x0 = fx.astype(np.intp)
    flat = feature.reshape(c, h * w)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yc = y0 + dy
        xc = x0 + dx
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        idx = np.where(valid, yc * w + xc, 0)
        corners.append((idx, valid, flat[:, idx] * valid))
    return wy, wx, corners


def bilinear_sample(feature: np.ndarray, y, x) -> np.ndarray:
    """Bilinear interpolation of ``feature`` (``(C, H, W)``) at continuous ``(y, x)``.

    Positions may be arrays; the result has shape ``(C,) + y.shape``. Samples
    outside the map see zero padding.
    """
    feature = np.asarray(feature, dtype=np.float64)
    py = np.asarray(y, dtype=np.float64)
    px = np.asarray(x, dtype=np.float64)
    wy, wx, ((_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11)) = _corners(feature, py, px)
    return (1 - wy) * (1 - wx) * v00 + (1 - wy) * wx * v01 + wy * (1 - wx) * v10 + wy * wx * v11


def tap_grid(k: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Undeformed sampling rows/cols per tap, each shaped ``(k*k, H, W)``."""
    r = k // 2
    ki, kj = np.meshgrid(np.arange(k) - r, np.arange(k) - r, indexing="ij")
    rows = np.arange(height)[None, :, None] + ki.reshape(-1, 1, 1)
    cols = np.arange(width)[None, None, :] + kj.reshape(-1, 1, 1)
    return (np.broadcast_to(rows, (k * k, height, width)).astype(np.float64),
            np.broadcast_to(cols, (k * k, height, width)).astype(np.float64))


@dataclass
class DeformableConv2d(Module):
    """Convolution whose taps sample the input at learned, clamped offsets."""

    base: Conv2dLayer
    offset: Conv2dLayer
    k_d: float = 0.1

    def __post_init__(self):
        k = self.base.kernel_size
        if self.offset.out_channels != 2 * k * k:
            raise ShapeError(
                f"offset predictor must emit {2 * k * k} channels, has {self.offset.out_channels}"
            )
        if self.offset.in_channels != self.base.in_channels:
            raise ShapeError("offset predictor and base conv must read the same input")

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int = 3, k_d: float = 0.1, rng=None):
        """Random base weights and a zero offset predictor (starts as a plain convolution)."""
        return cls(Conv2dLayer.init(c_in, c_out, k, rng), Conv2dLayer.init(c_in, 2 * k * k, k, zero=True), k_d)

    @property
    def in_channels(self) -> int:
        return self.base.in_channels

    @property
    def out_channels(self) -> int:
        return self.base.out_channels

    def named_parameters(self):
        return {**prefixed("base", self.base.named_parameters()),
                **prefixed("offset", self.offset.named_parameters())}

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ShapeError(f"deformable conv expects ({self.in_channels}, H, W), got {x.shape}")
        c, h, w = x.shape
        k = self.base.kernel_size
        raw, off_cache = self.offset.forward(x)
        off = clamp_offsets(raw, self.k_d, h, w)
        rows, cols = tap_grid(k, h, w)
        py = rows + off[0::2]
        px = cols + off[1::2]
        wy, wx, corners = _corners(x, py, px)
        (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
        samples = (1 - wy) * (1 - wx) * v00 + (1 - wy) * wx * v01 + wy * (1 - wx) * v10 + wy * wx * v11
        o = self.out_channels
        wmat = self.base.weight.reshape(o, c * k * k)
        y = (wmat @ samples.reshape(c * k * k, h * w)).reshape(o, h, w) + self.base.bias[:, None, None]
        cache = dict(x=x, raw=raw, off=off, py=py, px=px, wy=wy, wx=wx,
                     corners=corners, samples=samples, off_cache=off_cache)
        return y, cache

    def backward(self, cache, dy):
        x = cache["x"]
        c, h, w = x.shape
        k = self.base.kernel_size
        o = self.out_channels
        kk = k * k
        samples = cache["samples"].reshape(c * kk, h * w)
        dyf = dy.reshape(o, h * w)
        wmat = self.base.weight.reshape(o, c * kk)
        grads = {
            "base.weight": (dyf @ samples.T).reshape(self.base.weight.shape),
            "base.bias": dyf.sum(axis=1),
        }
        ds = (wmat.T @ dyf).reshape(c, kk, h, w)

        wy, wx = cache["wy"], cache["wx"]
        (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = cache["corners"]
        # Partial derivatives of each sample with respect to its row / column position.
        d_py = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * ds
        d_px = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * ds
        d_off = np.empty((2 * kk, h, w))
        d_off[0::2] = d_py.sum(axis=0)
        d_off[1::2] = d_px.sum(axis=0)
        d_raw = d_off * clamp_active(cache["raw"], self.k_d, h, w)

        chan = (np.arange(c) * (h * w))[:, None, None, None]
        idx, wts = [], []
        for cidx, m, wt in ((i00, m00, (1 - wy) * (1 - wx)), (i01, m01, (1 - wy) * wx),
                            (i10, m10, wy * (1 - wx)), (i11, m11, wy * wx)):
            idx.append((chan + cidx).ravel())
            wts.append((ds * (wt * m)).ravel())
        dx = np.bincount(np.concatenate(idx), weights=np.concatenate(wts),
                         minlength=c * h * w).reshape(c, h, w)

        dx_off, og = self.offset.backward(cache["off_cache"], d_raw)
        grads.update(prefixed("offset", og))
        return dx + dx_off, grads

    def __call__(self, x):
        return self.forward(x)[0]


@dataclass
class HintBlock(Module):
    """Three convolutions, one deformable convolution and a zero-initialised 1x1 convolution.

    The activation follows each of the first four layers; the final layer is
    linear so a fresh block outputs exactly zero.
    """

    convs: ConvStack
    deform: DeformableConv2d
    zero: Conv2dLayer
    act: str = "silu"

    @classmethod
    def init(cls, c_e: int, c_z: int, widths=(16, 16, 32), k: int = 3, k_d: float = 0.1,
             act: str = "silu", rng=None):
        rng = np.random.default_rng(rng)
        if len(widths) != 3:
            raise ShapeError("hint block needs three convolution widths")
        chans = [c_e, *widths]
        convs = ConvStack([Conv2dLayer.init(a, b, k, rng) for a, b in zip(chans[:-1], chans[1:])],
                          act=act, final_activation=True)
        deform = DeformableConv2d.init(widths[-1], widths[-1], k, k_d, rng)
        zero = Conv2dLayer.init(widths[-1], c_z, 1, zero=True)
        return cls(convs, deform, zero, act)

    @property
    def in_channels(self) -> int:
        return self.convs.layers[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.zero.out_channels

    def named_parameters(self):
        return {**prefixed("convs", self.convs.named_parameters()),
                **prefixed("deform", self.deform.named_parameters()),
                **prefixed("zero", self.zero.named_parameters())}

    def forward(self, e):
        e = np.asarray(e, dtype=np.float64)
        if e.ndim != 3 or e.shape[0] != self.in_channels:
            raise ShapeError(f"hint block expects ({self.in_channels}, h, w), got {e.shape}")
        f, _ = activation(self.act)
        h, c_convs = self.convs.forward(e)
        d, c_def = self.deform.forward(h)
        y, c_zero = self.zero.forward(f(d))
        return y, (c_convs, c_def, d, c_zero)

    def backward(self, cache, dy):
        c_convs, c_def, d, c_zero = cache
        _, df = activation(self.act)
        g, zg = self.zero.backward(c_zero, dy)
        g, dg = self.deform.backward(c_def, g * df(d))
        g, cg = self.convs.backward(c_convs, g)
        return g, {**prefixed("convs", cg), **prefixed("deform", dg), **prefixed("zero", zg)}

    def __call__(self, e):
        return self.forward(e)[0]
