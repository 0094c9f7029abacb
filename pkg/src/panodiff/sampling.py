"""Reverse diffusion with periodic yaw rotations of the latent and its guidance.

At ``K`` uniformly spaced denoising steps the latent and the guidance are
rotated by ``360 / K`` degrees about the up axis, so the left/right seam of
the panorama moves through the image and is denoised as interior content.
With the snap option (default) the angle is rounded to whole pixel columns
and every rotation is an exact circular shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .geometry import rotate_image, yaw_shift


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances ``betas[t-1]`` for ``t = 1..N``.

    ``alpha_bars`` has ``N + 1`` entries with ``alpha_bars[0] = 1``.
    """

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must be a non-empty vector in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def n_steps(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def check_step(self, t: int) -> int:
        if int(t) != t or not 1 <= t <= self.n_steps:
            raise ValueError(f"diffusion step must be an integer in [1, {self.n_steps}], got {t}")
        return int(t)


def build_noise_schedule(n_steps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_min`` to ``beta_max``."""
    if n_steps < 1 or not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"invalid schedule: N={n_steps}, beta in [{beta_min}, {beta_max}]")
    if n_steps == 1:
        return NoiseSchedule(np.array([beta_min]))
    return NoiseSchedule(np.linspace(beta_min, beta_max, n_steps))


def respace(schedule: NoiseSchedule, n_steps: int) -> NoiseSchedule:
    """Sub-sample a long schedule to ``n_steps`` evenly strided steps.

    The strided schedule keeps the cumulative products at the chosen steps,
    so step ``n_steps`` of the result has the noise level of the last step of
    the original.
    """
    total = schedule.n_steps
    if not 1 <= n_steps <= total:
        raise ValueError(f"cannot respace {total} steps to {n_steps}")
    ts = np.unique(np.round(np.linspace(total / n_steps, total, n_steps)).astype(int))
    ab = schedule.alpha_bars[np.concatenate([[0], ts])]
    return NoiseSchedule(1.0 - ab[1:] / ab[:-1])


def default_schedule(n_steps: int = 50, train_timesteps: Optional[int] = 1000,
                     beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear schedule over ``train_timesteps`` respaced to ``n_steps`` sampling steps."""
    if not train_timesteps or train_timesteps == n_steps:
        return build_noise_schedule(n_steps, beta_min, beta_max)
    return respace(build_noise_schedule(train_timesteps, beta_min, beta_max), n_steps)


def select_rotation_steps(n_steps: int, k_rot: int) -> list[int]:
    """Steps ``round(m * N / (K + 1))`` for ``m = 1..K`` (halves round up), deduplicated."""
    if k_rot < 0 or k_rot > n_steps:
        raise ValueError(f"need 0 <= K_rot <= N, got K_rot={k_rot}, N={n_steps}")
    den = k_rot + 1
    steps = {(2 * m * n_steps + den) // (2 * den) for m in range(1, k_rot + 1)}
    return sorted(min(max(s, 1), n_steps) for s in steps)


def rotation_spacing(n_steps: int, k_rot: int) -> float:
    """Number of denoising steps between consecutive rotations, ``N / (K + 1)``."""
    return n_steps / (k_rot + 1)


def rotation_angle(k_rot: int, width: Optional[int] = None, snap: bool = False) -> float:
    """``360 / K_rot`` degrees, optionally rounded to a whole number of pixel columns."""
    if k_rot < 1:
        raise ValueError("rotation angle needs at least one rotation step")
    alpha = 360.0 / k_rot
    if snap:
        if not width:
            raise ValueError("snapping needs the grid width")
        col = 360.0 / width
        alpha = math.floor(alpha / col + 0.5) * col
    return alpha


@dataclass(frozen=True)
class SgaSchedule:
    """Where and by how much the latent is rotated during sampling."""

    steps: tuple[int, ...]
    angle: float
    columns: Optional[int] = None
    k_rot: int = 0

    @classmethod
    def build(cls, n_steps: int, k_rot: int, width: int, snap: bool = True) -> "SgaSchedule":
        steps = tuple(select_rotation_steps(n_steps, k_rot))
        if not steps:
            return cls((), 0.0, 0 if snap else None, 0)
        alpha = rotation_angle(k_rot, width, snap)
        cols = int(round(alpha / (360.0 / width))) if snap else None
        return cls(steps, alpha, cols, k_rot)

    @property
    def total_angle(self) -> float:
        """Rotation accumulated over a full sampling run."""
        return len(self.steps) * self.angle

    def rotate(self, x: np.ndarray, sign: int = 1) -> np.ndarray:
        if self.columns is not None:
            return yaw_shift(x, sign * self.columns)
        return rotate_image(x, (sign * self.angle, 0.0, 0.0))


class Denoiser(Protocol):
    def predict(self, z_t: np.ndarray, t: int, schedule: NoiseSchedule,
                guidance: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x0_hat, eps_hat)`` for the noisy latent ``z_t``."""


def eps_from_x0(z_t, x0, alpha_bar):
    return (z_t - math.sqrt(alpha_bar) * x0) / math.sqrt(1.0 - alpha_bar)


def x0_from_eps(z_t, eps, alpha_bar):
    return (z_t - math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha_bar)


@dataclass
class AnalyticGaussianDenoiser:
    """Exact posterior mean for data drawn i.i.d. per pixel from ``N(mu0, var0)``.

    ``mu0`` is a scalar or one value per channel. Being pointwise, the
    prediction commutes with any pixel permutation, in particular yaw shifts.
    """

    mu0: float | np.ndarray = 0.0
    var0: float = 1.0

    def __post_init__(self):
        if not self.var0 > 0:
            raise ValueError("prior variance must be positive")

    def predict_x0(self, z_t, t, schedule):
        ab = schedule.alpha_bars[schedule.check_step(t)]
        mu = np.asarray(self.mu0, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None, None]
        return (math.sqrt(ab) * self.var0 * z_t + (1.0 - ab) * mu) / (ab * self.var0 + (1.0 - ab))

    def predict(self, z_t, t, schedule, guidance=None):
        x0 = self.predict_x0(z_t, t, schedule)
        return x0, eps_from_x0(z_t, x0, schedule.alpha_bars[t])


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "deterministic"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("deterministic", "stochastic"):
            raise ValueError(f"sampler mode must be 'deterministic' or 'stochastic', got {self.mode!r}")


@dataclass
class SampleTrace:
    """Rotation events and optional per-step latents recorded by :func:`sga_sample`."""

    events: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    total_angle: float = 0.0
    total_columns: int = 0


def sga_sample(denoiser: Denoiser, schedule: NoiseSchedule, sga: SgaSchedule,
               config: SamplerConfig, shape, guidance: Optional[np.ndarray] = None,
               trace: Optional[SampleTrace] = None, keep_snapshots: bool = False) -> np.ndarray:
    """Sample a ``shape = (C, H, W)`` latent, rotating at the steps of ``sga``.

    Before denoising step ``t`` in ``sga.steps`` both the latent and the
    guidance are rotated by ``sga.angle``. The result is rotated back by the
    accumulated angle so it lines up with the guidance as passed in.
    Deterministic mode is DDIM with ``eta = 0``; stochastic mode is ancestral
    DDPM sampling.
    """
    rng = np.random.default_rng(config.seed)
    ab = schedule.alpha_bars
    n = schedule.n_steps
    rot_steps = set(sga.steps)
    if trace is None:
        trace = SampleTrace()
    z = rng.standard_normal(tuple(shape))
    g = None if guidance is None else np.asarray(guidance, dtype=np.float64)
    for t in range(n, 0, -1):
        if t in rot_steps:
            z = sga.rotate(z)
            if g is not None:
                g = sga.rotate(g)
            trace.total_angle += sga.angle
            trace.total_columns += sga.columns or 0
            trace.events.append({"step": t, "yaw": sga.angle, "cumulative": trace.total_angle})
        x0, eps = denoiser.predict(z, t, schedule, g)
        if config.mode == "deterministic":
            z = math.sqrt(ab[t - 1]) * x0 + math.sqrt(1.0 - ab[t - 1]) * eps
        else:
            beta = schedule.betas[t - 1]
            c0 = math.sqrt(ab[t - 1]) * beta / (1.0 - ab[t])
            ct = math.sqrt(1.0 - beta) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
            z = c0 * x0 + ct * z
            if t > 1:
                var = beta * (1.0 - ab[t - 1]) / (1.0 - ab[t])
                z = z + math.sqrt(var) * rng.standard_normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise SamplingError(f"non-finite latent after step {t}")
        if keep_snapshots:
            trace.snapshots.append((t, z.copy()))
    if sga.columns is not None:
        w = z.shape[-1]
        back = trace.total_columns % w
        if back:
            z = yaw_shift(z, -back)
    else:
        back = math.fmod(trace.total_angle, 360.0)
        if abs(back) > 1e-9 and abs(back - 360.0) > 1e-9:
            z = rotate_image(z, (-back, 0.0, 0.0))
    return z


def seam_metric(image: np.ndarray) -> tuple[float, float, float]:
    """Wrap-around discontinuity relative to the mean horizontal gradient.

    Returns ``(d_seam, d_interior, ratio)`` where ``d_seam`` is the mean
    absolute difference between the first and last columns and ``d_interior``
    the mean over all adjacent interior column pairs.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-1] < 2:
        raise ValueError("seam metric needs at least two columns")
    d_seam = float(np.mean(np.abs(img[..., 0] - img[..., -1])))
    d_int = float(np.mean(np.abs(np.diff(img, axis=-1))))
    return d_seam, d_int, d_seam / (d_int + 1e-12)
