"""Central finite-difference checks for the hand-written backward passes.

Each ``check_*`` suite builds a tiny random float64 instance, evaluates the
analytic gradient of a scalar objective, and compares every parameter (and
the input, where it is differentiable) against central differences with
step ``1e-5``.

Relative error of one tensor is ``max|a - n| / max(max|a|, max|n|, 1e-6)``;
the floor keeps exactly-zero gradients (saturated clamps, stopped branches)
from dividing finite-difference round-off by zero.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .deform import DeformableConv2d, HintBlock, clamp_bounds
from .geometry import RotationAngles
from .layers import Conv2dLayer
from .sampling import build_noise_schedule
from .training import ControlEncoder, ToyDenoiser, _neg_cosine, diffusion_eps_loss, simsiam_loss

FD_STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``arr``, perturbed in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for n in range(flat.size):
        old = flat[n]
        flat[n] = old + eps
        fp = f()
        flat[n] = old - eps
        fm = f()
        flat[n] = old
        g[n] = (fp - fm) / (2 * eps)
    return grad


def compare(f: Callable[[], float], arrays: dict, analytic: dict, eps: float = FD_STEP) -> dict:
    """Relative error per named array."""
    return {name: relative_error(analytic[name], numeric_gradient(f, arr, eps))
            for name, arr in arrays.items()}


def _sample_margin(cache, k_d):
    """Distance of the nearest free sampling coordinate or raw offset to a kink.

    Coordinates whose offset is saturated do not move under perturbation, so
    they may sit on a pixel boundary without harm and are ignored.
    """
    py, px, raw = cache["py"], cache["px"], cache["raw"]
    h, w = cache["x"].shape[1:]
    bh, bw = clamp_bounds(k_d, h, w)
    free_y = np.abs(raw[0::2]) < bh
    free_x = np.abs(raw[1::2]) < bw
    frac = np.concatenate([(py - np.round(py))[free_y], (px - np.round(px))[free_x]])
    dist_clamp = np.concatenate([np.abs(np.abs(raw[0::2]) - bh).ravel(),
                                 np.abs(np.abs(raw[1::2]) - bw).ravel()])
    return min(np.min(np.abs(frac), initial=np.inf), np.min(dist_clamp))


def random_deformable(rng, c_in=2, c_out=2, k=3, k_d=0.25, offset_scale=0.6, saturate=False):
    layer = DeformableConv2d(
        Conv2dLayer(rng.normal(size=(c_out, c_in, k, k)), rng.normal(size=c_out)),
        Conv2dLayer(rng.normal(0, offset_scale, (2 * k * k, c_in, k, k)),
                    rng.normal(0, offset_scale, 2 * k * k)),
        k_d,
    )
    if saturate:
        # Push half of the offset channels far past the clamp so they saturate.
        layer.offset.bias[::2] += 50.0 * np.sign(rng.normal(size=layer.offset.bias[::2].shape))
    return layer


def check_deformable(seed: int, saturate: bool = False, margin: float = 1e-3) -> dict:
    rng = np.random.default_rng(seed)
    for _ in range(100):
        layer = random_deformable(rng, saturate=saturate)
        x = rng.normal(size=(layer.in_channels, 4, 6))
        _, cache = layer.forward(x)
        if _sample_margin(cache, layer.k_d) > margin:
            break
    else:
        raise RuntimeError("no kink-free deformable instance found")
    up = rng.normal(size=(layer.out_channels, 4, 6))

    def loss():
        return float(np.sum(layer(x) * up))

    _, cache = layer.forward(x)
    dx, grads = layer.backward(cache, up)
    params = layer.named_parameters()
    errs = compare(loss, params, grads)
    errs["input"] = relative_error(dx, numeric_gradient(loss, x))
    return errs


def random_hint_block(rng, c_e=3, c_z=2, widths=(3, 3, 4), k_d=0.25):
    block = HintBlock.init(c_e, c_z, widths, k=3, k_d=k_d, rng=rng)
    for name, p in block.named_parameters().items():
        if p.ndim == 4:
            # Unit-gain fan-in scaling keeps activations O(1); larger values
            # make finite differences truncation-limited.
            p[...] = rng.normal(0, 1.5 / np.sqrt(p[0].size), p.shape)
        else:
            p[...] = rng.normal(0, 0.3, p.shape)
    return block


def check_hint_block(seed: int, margin: float = 1e-3) -> dict:
    rng = np.random.default_rng(seed)
    for _ in range(200):
        block = random_hint_block(rng)
        e = rng.normal(size=(block.in_channels, 4, 6))
        _, cache = block.forward(e)
        if _sample_margin(cache[1], block.deform.k_d) > margin:
            break
    else:
        raise RuntimeError("no kink-free hint-block instance found")
    up = rng.normal(size=(block.out_channels, 4, 6))

    def loss():
        return float(np.sum(block(e) * up))

    _, cache = block.forward(e)
    de, grads = block.backward(cache, up)
    errs = compare(loss, block.named_parameters(), grads)
    errs["input"] = relative_error(de, numeric_gradient(loss, e))
    return errs


def _randomize(module, rng, scale=0.5):
    for p in module.named_parameters().values():
        p[...] = rng.normal(0, scale, p.shape)


def check_simsiam(seed: int, align_mode: str = "inverse") -> dict:
    """Gradients of the SimSiam loss with the target branches held fixed.

    Stop-gradient means the analytic gradient must match finite differences
    of the objective in which each prediction is compared with a *frozen*
    copy of the other branch's features.
    """
    rng = np.random.default_rng(seed)
    enc = ControlEncoder.init(2, width=3, rng=rng)
    _randomize(enc, rng)
    c_lat = rng.normal(size=(2, 4, 8))
    angles = RotationAngles(float(rng.uniform(0, 360)), float(rng.uniform(-20, 20)),
                            float(rng.uniform(-20, 20)))
    _, grads, info = simsiam_loss(enc, c_lat, angles=angles, align_mode=align_mode)
    z1_t, z2_t = info["z1"].copy(), info["z2"].copy()

    def frozen():
        _, _, cur = simsiam_loss(enc, c_lat, angles=angles, align_mode=align_mode)
        return 0.5 * _neg_cosine(cur["p1"], z2_t)[0] + 0.5 * _neg_cosine(cur["p2"], z1_t)[0]

    return compare(frozen, enc.named_parameters(), grads)


def check_eps_loss(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    den = ToyDenoiser.init(2, 3, hidden=4, rng=rng)
    _randomize(den, rng)
    schedule = build_noise_schedule(10)
    z0 = rng.normal(size=(2, 4, 8))
    cond = rng.normal(size=(3, 4, 8))
    noise = rng.normal(size=z0.shape)
    t = int(rng.integers(1, 11))

    def loss():
        return diffusion_eps_loss(den, z0, t, cond, noise, schedule)[0]

    _, grads, d_cond = diffusion_eps_loss(den, z0, t, cond, noise, schedule)
    errs = compare(loss, den.named_parameters(), grads)
    errs["cond"] = relative_error(d_cond, numeric_gradient(loss, cond))
    return errs


SUITES = {
    "deformable": lambda s: check_deformable(s),
    "deformable_saturated": lambda s: check_deformable(s, saturate=True),
    "hint_block": check_hint_block,
    "simsiam": check_simsiam,
    "eps_loss": check_eps_loss,
}


def run_all(n_instances: int = 10, seed: int = 0) -> dict:
    """Worst relative error of each suite over ``n_instances`` random instances."""
    return {name: max(max(fn(seed + i).values()) for i in range(n_instances))
            for name, fn in SUITES.items()}
