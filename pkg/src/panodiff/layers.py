"""Minimal numpy layers with hand-written backward passes.

Every layer exposes ``forward(x) -> (y, cache)`` and
``backward(cache, dy) -> (dx, grads)`` where ``grads`` maps parameter names
(as returned by :meth:`Module.named_parameters`) to arrays of the same shape.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    pass


def _silu(x):
    return x * expit(x)


def _silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(x.dtype)),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "identity": (lambda x: x, np.ones_like),
}


def activation(name: str):
    """``(f, f')`` pair for an activation name."""
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


class Module:
    """Parameter bookkeeping shared by all layers and blocks."""

    def named_parameters(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def copy(self):
        return copy.deepcopy(self)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


def prefixed(prefix: str, d: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in d.items()}


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 'same' cross-correlation with zero padding.

    ``x`` is ``(B, C, H, W)``, ``weight`` is ``(O, C, k, k)`` with odd ``k``.
    """
    k = weight.shape[-1]
    p = k // 2
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv expects {weight.shape[1]} input channels, got {x.shape[1]}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x: np.ndarray, weight: np.ndarray, dout: np.ndarray):
    """Gradients ``(dx, dweight, dbias)`` of :func:`conv2d`."""
    k = weight.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dx = conv2d(dout, weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return dx, dw, db


@dataclass
class Conv2dLayer(Module):
    """Stride-1, zero-padded, odd-kernel convolution on ``(C, H, W)`` or ``(B, C, H, W)``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        o, _, kh, kw = self.weight.shape
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.bias.shape != (o,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {o} output channels")

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int = 3, rng=None, zero: bool = False, gain: float = 2.0):
        """He-normal weights and zero bias, or all zeros when ``zero`` is set."""
        if zero:
            return cls(np.zeros((c_out, c_in, k, k)), np.zeros(c_out))
        rng = np.random.default_rng(rng)
        std = np.sqrt(gain / (c_in * k * k))
        return cls(rng.normal(0.0, std, (c_out, c_in, k, k)), np.zeros(c_out))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    def named_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        batched = x.ndim == 4
        xb = x if batched else x[None]
        y = conv2d(xb, self.weight, self.bias)
        return (y if batched else y[0]), (xb, batched)

    def backward(self, cache, dy):
        xb, batched = cache
        dyb = dy if batched else dy[None]
        dx, dw, db = conv2d_backward(xb, self.weight, dyb)
        return (dx if batched else dx[0]), {"weight": dw, "bias": db}

    def __call__(self, x):
        return self.forward(x)[0]


@dataclass
class ConvStack(Module):
    """Convolutions with an activation after every layer except (optionally) the last."""

    layers: list
    act: str = "silu"
    final_activation: bool = False

    def named_parameters(self):
        out = {}
        for n, layer in enumerate(self.layers):
            out.update(prefixed(f"layer{n}", layer.named_parameters()))
        return out

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def forward(self, x):
        f, _ = activation(self.act)
        caches = []
        h = x
        last = len(self.layers) - 1
        for n, layer in enumerate(self.layers):
            pre, c = layer.forward(h)
            act_on = n < last or self.final_activation
            caches.append((c, pre if act_on else None))
            h = f(pre) if act_on else pre
        return h, caches

    def backward(self, caches, dy):
        _, df = activation(self.act)
        grads = {}
        g = dy
        for n in range(len(self.layers) - 1, -1, -1):
            c, pre = caches[n]
            if pre is not None:
                g = g * df(pre)
            g, lg = self.layers[n].backward(c, g)
            grads.update(prefixed(f"layer{n}", lg))
        return g, grads

    def __call__(self, x):
        return self.forward(x)[0]
