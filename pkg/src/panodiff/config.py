"""Experiment configuration stored as JSON."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # grid and widths
    height: int = 32
    width: int = 64
    c_z: int = 1
    c_e: int = 16
    num_classes: int = 8
    hint_widths: tuple = (16, 16, 32)
    encoder_width: int = 8
    denoiser_hidden: int = 32
    activation: str = "silu"
    k_d: float = 0.1
    # diffusion
    n_steps: int = 50
    train_timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    k_rot: int = 4
    snap: bool = True
    sampler_mode: str = "deterministic"
    # training
    lam: float = 0.1
    control_bounds: tuple = (360.0, 3.0, 3.0)
    data_bounds: tuple = (360.0, 10.0, 10.0)
    fov_range: tuple = (30.0, 120.0)
    aspect: float = 2.0
    align_mode: str = "inverse"
    reproject: bool = True
    nfov: bool = True
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    train_steps: int = 2000
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("hint_widths", "control_bounds", "data_bounds", "fov_range"):
            setattr(self, name, tuple(getattr(self, name)))
        try:
            self.validate()
        except TypeError as exc:
            raise ConfigError(f"malformed config value: {exc}") from exc

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for f in dataclasses.fields(self):
            if isinstance(f.default, (int, float)) and not isinstance(f.default, bool):
                v = getattr(self, f.name)
                need(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v),
                     f"{f.name} must be a finite number, got {v!r}")
                if isinstance(f.default, int):
                    need(int(v) == v, f"{f.name} must be an integer, got {v!r}")
            elif isinstance(f.default, bool):
                need(isinstance(getattr(self, f.name), bool), f"{f.name} must be true or false")
        need(self.lam >= 0, "lam must be non-negative")
        need(self.height >= 1 and self.width == 2 * self.height, "grid must be H x 2H")
        need(self.c_z >= 1 and self.c_e >= 1, "channel counts must be positive")
        need(self.num_classes >= 2, "need at least one real class plus Unknown")
        need(len(self.hint_widths) == 3 and min(self.hint_widths) >= 1, "hint_widths needs three positive widths")
        need(self.encoder_width >= 1 and self.denoiser_hidden >= 1, "widths must be positive")
        need(self.k_d >= 0, "k_d must be non-negative")
        need(self.n_steps >= 1, "n_steps must be positive")
        need(self.train_timesteps >= self.n_steps, "train_timesteps must be >= n_steps")
        need(0 < self.beta_min <= self.beta_max < 1, "need 0 < beta_min <= beta_max < 1")
        need(0 <= self.k_rot <= self.n_steps, "need 0 <= k_rot <= n_steps")
        need(self.sampler_mode in ("deterministic", "stochastic"), "sampler_mode is deterministic|stochastic")
        need(self.align_mode in ("inverse", "literal"), "align_mode is inverse|literal")
        for name in ("control_bounds", "data_bounds"):
            b = getattr(self, name)
            need(len(b) == 3 and all(v >= 0 for v in b), f"{name} must be three non-negative angles")
        lo, hi = self.fov_range
        need(0 < lo <= hi < 180, "fov_range must lie in (0, 180)")
        need(self.aspect > 0, "aspect must be positive")
        need(self.lr >= 0 and 0 <= self.momentum < 1, "need lr >= 0 and 0 <= momentum < 1")
        need(self.batch_size >= 1 and self.train_steps >= 0, "batch_size >= 1, train_steps >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)
