"""Noise schedule, forward diffusion, training loss, and samplers.

The forward process follows z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps
with abar the cumulative product of per-step alpha = 1 - beta. Timesteps are
1-based: t in 1..T, and abar(0) = 1 by convention (used by the samplers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericInstabilityError, ShapeMismatchError, TimestepRangeError


class NoiseSchedule:
    """Immutable beta/alpha/alpha_bar tables over timesteps 1..T."""

    def __init__(self, betas: np.ndarray):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a nonempty 1-D array")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.T = len(betas)
        # index 0 is the t=0 convention slot: beta unused, abar(0) = 1
        self._beta = np.concatenate([[np.nan], betas])
        self._alpha = np.concatenate([[1.0], 1.0 - betas])
        self._abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, T))

    def _check_t(self, t, allow_zero: bool = False):
        t = np.asarray(t)
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.T):
            raise TimestepRangeError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def beta(self, t):
        t = self._check_t(t)
        return self._beta[t]

    def alpha(self, t):
        t = self._check_t(t)
        return self._alpha[t]

    def alpha_bar(self, t):
        t = self._check_t(t, allow_zero=True)
        return self._abar[t]

    def state_dict(self) -> dict:
        return {"betas": self._beta[1:].copy()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "NoiseSchedule":
        return cls(np.asarray(state["betas"]))


def _per_sample(coef: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    """Shape a per-sample scalar array for broadcasting against (B, C, H, W)."""
    c = torch.as_tensor(coef, dtype=like.dtype, device=like.device)
    if c.ndim == 0:
        return c
    return c.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward-noise z0 at timestep t in 1..T: sqrt(abar)*z0 + sqrt(1-abar)*eps."""
    if eps.shape != z0.shape:
        raise ShapeMismatchError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise TimestepRangeError(f"timestep {t} outside [1, {schedule.T}]")
    abar = schedule.alpha_bar(t)
    return _per_sample(np.sqrt(abar), z0) * z0 + _per_sample(np.sqrt(1.0 - abar), z0) * eps


def training_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of weight * (eps_pred - eps_true)^2; weight broadcasts over channels."""
    if eps_pred.shape != eps_true.shape:
        raise ShapeMismatchError(f"{tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}")
    sq = (eps_pred - eps_true) ** 2
    if weight is None:
        return sq.mean()
    return (weight * sq).mean()


def classifier_free_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeMismatchError("conditional/unconditional shapes differ")
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "deterministic"  # "deterministic" (DDIM) or "ancestral"
    steps: int = 50
    guidance_scale: float = 0.0  # 0 disables guidance entirely
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("deterministic", "ancestral"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")


def sampler_timesteps(T: int, steps: int) -> list[int]:
    """Descending subset of 1..T with `steps` entries, endpoints included."""
    if steps > T:
        raise ValueError(f"steps {steps} exceeds schedule length {T}")
    ts = np.unique(np.round(np.linspace(T, 1, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def sample(model, shape, cond, cfg: SamplerConfig, schedule: NoiseSchedule,
           generator: torch.Generator | None = None, dtype=torch.float32,
           z_init: torch.Tensor | None = None) -> torch.Tensor:
    """Run the reverse process from Gaussian noise and return the z0 estimate.

    `model` is called as model(z_t, t, cond) and must return the predicted
    noise. The deterministic kind is the eta=0 (DDIM) update; ancestral uses
    eta=1, drawing fresh noise from `generator` at each step.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    if z_init is None:
        z = torch.randn(shape, generator=generator, dtype=dtype)
    else:
        z = z_init.to(dtype)
    ts = sampler_timesteps(schedule.T, cfg.steps)
    eta = 0.0 if cfg.kind == "deterministic" else 1.0
    for i, t in enumerate(ts):
        eps = model(z, t, cond)
        if not torch.isfinite(eps).all():
            raise NumericInstabilityError(f"non-finite model output at step {i} (t={t})")
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab_t = float(schedule.alpha_bar(t))
        ab_prev = float(schedule.alpha_bar(t_prev))
        x0 = (z - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)) if t_prev > 0 else 0.0
        dir_coef = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
        z = np.sqrt(ab_prev) * x0 + dir_coef * eps
        if sigma > 0:
            z = z + sigma * torch.randn(z.shape, generator=generator, dtype=z.dtype)
        if not torch.isfinite(z).all():
            raise NumericInstabilityError(f"non-finite latent after step {i} (t={t})")
    return z


def make_weight_map(ones_like: torch.Tensor) -> torch.Tensor:
    """All-ones weight map matching a latent's spatial shape (1 x H x W)."""
    return torch.ones(1, *ones_like.shape[-2:], dtype=ones_like.dtype)
