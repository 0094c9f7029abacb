"""Rotation-aware training of a toy controlled denoiser.

The toy model mirrors a ControlNet-style pipeline at desk scale::

    E_pixel --hint block--> C_latent --F_c--> control features --+
                                                                 v
    z_t, t -------------------------------------------------> denoiser -> eps_hat

Training combines the usual epsilon-prediction loss with a SimSiam loss that
asks ``F_c`` to produce the same features for ``C_latent`` and a randomly
rotated copy of it, and augments every sample with a random rotation of the
panorama together with its (Unknown-filled) segmentation map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .config import ExperimentConfig
from .deform import HintBlock
from .geometry import (
    ErpGrid, RotationAngles, gather_pixels, matrix_index_map, nfov_mask, random_nfov,
    rotation_matrix, scatter_pixels,
)
from .layers import Conv2dLayer, ConvStack, Module, ShapeError, prefixed
from .sampling import NoiseSchedule, default_schedule, x0_from_eps
from .semantic import (
    LabelEmbeddingTable, downsample_seg, fill_unknown, masks_from_seg, pixel_embedding,
)


class TrainingError(RuntimeError):
    pass


class RotationBounds(NamedTuple):
    """Maximum yaw, pitch and roll (degrees) of a random rotation."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0


def sample_rotation(bounds, seed=None) -> RotationAngles:
    """Yaw in ``[0, yaw_max)``, pitch and roll symmetric around zero.

    ``seed`` may be an int or a ``numpy.random.Generator`` (which is advanced).
    """
    b = RotationBounds(*bounds)
    if any(v < 0 for v in b):
        raise ValueError(f"rotation bounds must be non-negative, got {tuple(b)}")
    rng = np.random.default_rng(seed)
    yaw = rng.uniform(0.0, b.yaw) if b.yaw > 0 else 0.0
    pitch = rng.uniform(-b.pitch, b.pitch) if b.pitch > 0 else 0.0
    roll = rng.uniform(-b.roll, b.roll) if b.roll > 0 else 0.0
    return RotationAngles(float(yaw), float(pitch), float(roll))


def spherical_reprojection(x: np.ndarray, seg: np.ndarray, bounds, seed=None):
    """Rotate a panorama and its class map by the same random rotation.

    Both use nearest-pixel resampling, so ids are never blended. Returns
    ``(x_r, seg_r, angles)``.
    """
    x = np.asarray(x)
    seg = np.asarray(seg)
    if x.shape[-2:] != seg.shape[-2:]:
        raise ShapeError(f"panorama grid {x.shape[-2:]} differs from map grid {seg.shape[-2:]}")
    grid = ErpGrid.from_shape(x.shape)
    angles = sample_rotation(bounds, seed)
    idx = matrix_index_map(grid, rotation_matrix(angles))
    return gather_pixels(x, idx), gather_pixels(seg, idx), angles


def neg_cosine(p: np.ndarray, z: np.ndarray) -> float:
    """``-cos(p, z)`` over the flattened arrays, in ``[-1, 1]``."""
    return _neg_cosine(p, z)[0]


def _neg_cosine(p, z):
    p = np.asarray(p, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    a = float(p @ z)
    b = float(p @ p)
    c = float(z @ z)
    if b == 0.0 or c == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    denom = math.sqrt(b * c)
    value = min(1.0, max(-1.0, -a / denom))
    grad_p = -(z - (a / b) * p) / denom
    return value, grad_p


@dataclass
class ControlEncoder(Module):
    """Control branch ``F_c`` plus the pointwise prediction head ``h``.

    ``head=None`` means the identity. Both SimSiam branches run the same
    ``fc`` instance.
    """

    fc: ConvStack
    head: Optional[ConvStack] = None

    @classmethod
    def init(cls, c_in: int, width: int = 8, k: int = 3, act: str = "silu", rng=None,
             bias_scale: float = 0.1):
        rng = np.random.default_rng(rng)
        l1 = Conv2dLayer.init(c_in, width, k, rng)
        l2 = Conv2dLayer.init(width, width, k, rng)
        # Non-zero biases keep features defined while the hint block still outputs zeros.
        l1.bias[:] = rng.normal(0.0, bias_scale, width)
        l2.bias[:] = rng.normal(0.0, bias_scale, width)
        h1 = Conv2dLayer.init(width, width, 1, rng)
        h2 = Conv2dLayer.init(width, width, 1, rng, gain=1.0)
        return cls(ConvStack([l1, l2], act), ConvStack([h1, h2], act))

    @property
    def out_channels(self) -> int:
        return self.fc.out_channels

    def named_parameters(self):
        out = prefixed("fc", self.fc.named_parameters())
        if self.head is not None:
            out.update(prefixed("head", self.head.named_parameters()))
        return out

    def apply_head(self, z):
        if self.head is None:
            return z, None
        return self.head.forward(z)

    def head_backward(self, cache, dp):
        if self.head is None:
            return dp, {}
        d, g = self.head.backward(cache, dp)
        return d, prefixed("head", g)


def _alignment_index(grid: ErpGrid, angles, align_mode: str) -> np.ndarray:
    r = rotation_matrix(angles)
    if align_mode == "inverse":
        return matrix_index_map(grid, r.T)
    if align_mode == "literal":
        return matrix_index_map(grid, r)
    raise ValueError(f"align_mode must be 'inverse' or 'literal', got {align_mode!r}")


def _accumulate(acc: dict, new: dict, scale: float = 1.0):
    for k, v in new.items():
        if k in acc:
            acc[k] = acc[k] + scale * v
        else:
            acc[k] = scale * v
    return acc


def simsiam_loss(encoder: ControlEncoder, c_latent: np.ndarray, bounds=None, seed=None, *,
                 angles=None, align_mode: str = "inverse"):
    """Symmetrised negative-cosine loss between a latent and its rotated copy.

    Branch 1 encodes ``c_latent``; branch 2 encodes its rotation and maps the
    features back to the common frame (``align_mode="inverse"``) or applies
    the forward rotation again (``"literal"``). Each prediction is compared
    with the other branch's features under stop-gradient. Pass either
    ``bounds`` and ``seed`` or explicit ``angles``.

    Returns ``(loss, grads, info)``; ``grads`` covers the encoder parameters
    only, since ``c_latent`` is treated as data.
    """
    c_latent = np.asarray(c_latent, dtype=np.float64)
    if angles is None:
        angles = sample_rotation(bounds if bounds is not None else (0, 0, 0), seed)
    grid = ErpGrid.from_shape(c_latent.shape)
    idx_rot = matrix_index_map(grid, rotation_matrix(angles))
    idx_align = _alignment_index(grid, angles, align_mode)

    c_rot = gather_pixels(c_latent, idx_rot)
    f1, cache1 = encoder.fc.forward(c_latent)
    f2, cache2 = encoder.fc.forward(c_rot)
    z1 = f1
    z2 = gather_pixels(f2, idx_align)
    if not (np.any(z1) and np.any(z2)):
        raise TrainingError("encoder produced all-zero features; cosine is undefined")
    p1, hc1 = encoder.apply_head(z1)
    p2, hc2 = encoder.apply_head(z2)
    d1, dp1 = _neg_cosine(p1, z2)
    d2, dp2 = _neg_cosine(p2, z1)
    loss = 0.5 * d1 + 0.5 * d2

    grads: dict = {}
    dz1, hg1 = encoder.head_backward(hc1, 0.5 * dp1.reshape(p1.shape))
    dz2, hg2 = encoder.head_backward(hc2, 0.5 * dp2.reshape(p2.shape))
    _accumulate(grads, hg1)
    _accumulate(grads, hg2)
    _, fg1 = encoder.fc.backward(cache1, dz1)
    _, fg2 = encoder.fc.backward(cache2, scatter_pixels(dz2, idx_align))
    _accumulate(grads, prefixed("fc", fg1))
    _accumulate(grads, prefixed("fc", fg2))
    info = {"angles": RotationAngles(*angles), "z1": z1, "z2": z2, "p1": p1, "p2": p2}
    return loss, grads, info


def time_embedding(t: int, n_steps: int, size: int = 4) -> np.ndarray:
    """Sinusoidal features of ``t / N``."""
    s = t / n_steps
    freqs = np.arange(1, size // 2 + 1) * (math.pi / 2)
    return np.concatenate([np.sin(freqs * s), np.cos(freqs * s)])


@dataclass
class ToyDenoiser(Module):
    """Two-convolution epsilon predictor on ``[z_t, time features, control]``."""

    net: ConvStack
    c_z: int
    t_dim: int = 4

    @classmethod
    def init(cls, c_z: int, c_cond: int, hidden: int = 32, k: int = 3, act: str = "silu",
             t_dim: int = 4, rng=None):
        rng = np.random.default_rng(rng)
        l1 = Conv2dLayer.init(c_z + t_dim + c_cond, hidden, k, rng)
        l2 = Conv2dLayer.init(hidden, c_z, k, rng, gain=1.0)
        return cls(ConvStack([l1, l2], act), c_z, t_dim)

    def named_parameters(self):
        return prefixed("net", self.net.named_parameters())

    def _inputs(self, z_t, t, n_steps, cond):
        h, w = z_t.shape[-2:]
        temb = np.broadcast_to(time_embedding(t, n_steps, self.t_dim)[:, None, None], (self.t_dim, h, w))
        parts = [z_t, temb]
        if cond is not None:
            parts.append(cond)
        x = np.concatenate(parts, axis=0)
        if x.shape[0] != self.net.layers[0].in_channels:
            raise ShapeError(f"denoiser expects {self.net.layers[0].in_channels} input channels, got {x.shape[0]}")
        return x

    def forward(self, z_t, t, n_steps, cond=None):
        eps, cache = self.net.forward(self._inputs(z_t, t, n_steps, cond))
        return eps, cache

    def backward(self, cache, d_eps):
        dx, g = self.net.backward(cache, d_eps)
        return dx[self.c_z + self.t_dim:], prefixed("net", g)


def diffusion_eps_loss(denoiser: ToyDenoiser, z0, t: int, cond, noise, schedule: NoiseSchedule):
    """Mean squared error between ``noise`` and the denoiser's prediction at step ``t``.

    Returns ``(loss, grads, d_cond)``.
    """
    t = schedule.check_step(t)
    ab = schedule.alpha_bars[t]
    z_t = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * noise
    eps_hat, cache = denoiser.forward(z_t, t, schedule.n_steps, cond)
    r = eps_hat - noise
    loss = float(np.mean(r * r))
    d_cond, grads = denoiser.backward(cache, 2.0 * r / r.size)
    return loss, grads, d_cond


def total_loss(l_c: float, l_siam: float, lam: float) -> float:
    """``L_all = L_c + lam * L_siam``."""
    return l_c + lam * l_siam


class LossBreakdown(NamedTuple):
    l_c: float
    l_siam: float
    lam: float
    l_all: float


@dataclass
class ToyModel(Module):
    """Hint block, control encoder and denoiser trained together."""

    hint: HintBlock
    encoder: ControlEncoder
    denoiser: ToyDenoiser
    n_steps: int = 50

    @classmethod
    def init(cls, config: ExperimentConfig, rng=None):
        rng = np.random.default_rng(config.seed if rng is None else rng)
        hint = HintBlock.init(config.c_e, config.c_z, config.hint_widths, 3, config.k_d,
                              config.activation, rng)
        enc = ControlEncoder.init(config.c_z, config.encoder_width, 3, config.activation, rng)
        den = ToyDenoiser.init(config.c_z, config.encoder_width, config.denoiser_hidden, 3,
                               config.activation, rng=rng)
        return cls(hint, enc, den, config.n_steps)

    def named_parameters(self):
        return {**prefixed("hint", self.hint.named_parameters()),
                **prefixed("encoder", self.encoder.named_parameters()),
                **prefixed("denoiser", self.denoiser.named_parameters())}

    def load_parameters(self, params: dict):
        own = self.named_parameters()
        missing = set(own) - set(params)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, v in own.items():
            if params[k].shape != v.shape:
                raise ShapeError(f"parameter {k}: expected {v.shape}, got {params[k].shape}")
            v[...] = params[k]

    def control_latent(self, e_pixel):
        """``C_latent`` for a per-pixel embedding."""
        return self.hint(e_pixel)

    def predict(self, z_t, t, schedule, guidance=None):
        """Sampler interface: ``guidance`` is a ``C_latent`` map (or None for zeros)."""
        if guidance is None:
            guidance = np.zeros_like(z_t)
        cond = self.encoder.fc(guidance)
        eps, _ = self.denoiser.forward(z_t, t, schedule.n_steps, cond)
        return x0_from_eps(z_t, eps, schedule.alpha_bars[t]), eps


@dataclass
class Batch:
    """Panoramas ``(B, C_z, H, W)`` with full-resolution class maps ``(B, H', W')``."""

    panoramas: np.ndarray
    segmaps: np.ndarray
    table: LabelEmbeddingTable


@dataclass
class TrainState:
    model: ToyModel
    velocity: dict = field(default_factory=dict)
    step: int = 0


def sgd_update(params: dict, grads: dict, velocity: dict, lr: float, momentum: float = 0.0):
    """Heavy-ball SGD: ``v <- momentum * v + g``, ``p <- p - lr * v`` (in place)."""
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        v = velocity.get(k)
        v = g.copy() if v is None else momentum * v + g
        velocity[k] = v
        p -= lr * v


def sample_losses(model: ToyModel, x, seg, table: LabelEmbeddingTable, config: ExperimentConfig,
                  schedule: NoiseSchedule, rng: np.random.Generator):
    """Losses and gradients for one training sample.

    Returns ``(l_c, l_siam, grads_c, grads_siam)`` with gradient dicts keyed
    like :meth:`ToyModel.named_parameters`.
    """
    x = np.asarray(x, dtype=np.float64)
    seg = np.asarray(seg)
    if config.nfov:
        spec = random_nfov(rng, config.fov_range, config.aspect)
        seg = fill_unknown(seg, nfov_mask(ErpGrid.from_shape(seg.shape), spec), table.unknown_id)
    if config.reproject:
        if x.shape[-2:] == seg.shape:
            x, seg, _ = spherical_reprojection(x, seg, config.data_bounds, rng)
        else:
            angles = sample_rotation(config.data_bounds, rng)
            r = rotation_matrix(angles)
            x = gather_pixels(x, matrix_index_map(ErpGrid.from_shape(x.shape), r))
            seg = gather_pixels(seg, matrix_index_map(ErpGrid.from_shape(seg.shape), r))
    h, w = x.shape[-2:]
    if seg.shape != (h, w):
        seg = downsample_seg(seg, h, w)
    e = pixel_embedding(masks_from_seg(seg, table.num_classes), table)

    c_lat, hint_cache = model.hint.forward(e)
    cond, fc_cache = model.encoder.fc.forward(c_lat)
    t = int(rng.integers(1, schedule.n_steps + 1))
    noise = rng.standard_normal(x.shape)
    l_c, den_grads, d_cond = diffusion_eps_loss(model.denoiser, x, t, cond, noise, schedule)
    d_lat, fc_grads = model.encoder.fc.backward(fc_cache, d_cond)
    _, hint_grads = model.hint.backward(hint_cache, d_lat)
    grads_c = {**prefixed("denoiser", den_grads), **prefixed("encoder.fc", fc_grads),
               **prefixed("hint", hint_grads)}

    angles = sample_rotation(config.control_bounds, rng)
    l_siam, siam_grads, _ = simsiam_loss(model.encoder, c_lat, angles=angles,
                                         align_mode=config.align_mode)
    return l_c, l_siam, grads_c, prefixed("encoder", siam_grads)


def train_step(state: TrainState, batch: Batch, config: ExperimentConfig, seed,
               schedule: Optional[NoiseSchedule] = None):
    """One SGD step on ``L_all`` averaged over the batch.

    Returns ``(new_state, LossBreakdown)``; the input state is not modified.
    A non-finite loss or gradient raises :class:`TrainingError`.
    """
    if schedule is None:
        schedule = default_schedule(config.n_steps, config.train_timesteps, config.beta_min, config.beta_max)
    rng = np.random.default_rng(seed)
    model = state.model
    n = len(batch.panoramas)
    if n == 0 or len(batch.segmaps) != n:
        raise ShapeError("batch needs matching, non-empty panoramas and segmaps")
    lc_sum = ls_sum = 0.0
    grads: dict = {}
    for b in range(n):
        l_c, l_s, g_c, g_s = sample_losses(model, batch.panoramas[b], batch.segmaps[b], batch.table,
                                           config, schedule, rng)
        lc_sum += l_c
        ls_sum += l_s
        _accumulate(grads, g_c, 1.0 / n)
        _accumulate(grads, g_s, config.lam / n)
    l_c, l_s = lc_sum / n, ls_sum / n
    l_all = total_loss(l_c, l_s, config.lam)
    if not math.isfinite(l_all) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingError(f"non-finite loss or gradient at step {state.step}")
    new_model = model.copy()
    velocity = {k: v.copy() for k, v in state.velocity.items()}
    sgd_update(new_model.named_parameters(), grads, velocity, config.lr, config.momentum)
    return TrainState(new_model, velocity, state.step + 1), LossBreakdown(l_c, l_s, config.lam, l_all)


def train_toy(config: ExperimentConfig, panoramas, segmaps, table: LabelEmbeddingTable,
              steps: Optional[int] = None, seed=None, state: Optional[TrainState] = None,
              callback=None) -> tuple[TrainState, list]:
    """Run ``steps`` training steps on minibatches drawn with replacement.

    ``callback(step, LossBreakdown)`` is called after every step. Returns the
    final state and the list of loss breakdowns.
    """
    steps = config.train_steps if steps is None else steps
    seed = config.seed if seed is None else seed
    panoramas = np.asarray(panoramas, dtype=np.float64)
    segmaps = np.asarray(segmaps)
    n = len(panoramas)
    if n == 0 or len(segmaps) != n:
        raise ShapeError("need matching, non-empty panoramas and segmaps")
    schedule = default_schedule(config.n_steps, config.train_timesteps, config.beta_min, config.beta_max)
    if state is None:
        state = TrainState(ToyModel.init(config, np.random.default_rng([seed, 0])))
    picker = np.random.default_rng([seed, 1])
    history = []
    for s in range(steps):
        idx = picker.integers(0, n, config.batch_size)
        state, losses = train_step(state, Batch(panoramas[idx], segmaps[idx], table), config,
                                   [seed, 2, state.step], schedule)
        history.append(losses)
        if callback is not None:
            callback(state.step, losses)
    return state, history
