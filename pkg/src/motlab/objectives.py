"""Losses and diffusion machinery: cosine schedule, forward noising, reverse step, combined loss, CFG."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import DiffusionConfig

__all__ = [
    "DiffusionConfig",
    "NoiseSchedule",
    "build_cosine_schedule",
    "schedule_for",
    "respace",
    "forward_noise",
    "reverse_step",
    "ddpm_loss",
    "combined_loss",
    "cfg_combine",
    "timestep_embedding",
]

# beta_t = 1 - alpha_t is capped at 0.999
ALPHA_MIN = 0.001


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables; index ``t - 1`` holds timestep t (t = 1..T).

    ``timesteps`` maps schedule steps back to training timesteps (identity
    unless the schedule was respaced for faster sampling).
    """

    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha)

    def ab(self, t: int) -> float:
        return float(self.alpha_bar[t - 1])

    def ab_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def _sigma(alpha: np.ndarray, alpha_bar: np.ndarray, mode: str) -> np.ndarray:
    if mode == "zero":
        return np.zeros_like(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt((1.0 - prev) / (1.0 - alpha_bar) * (1.0 - alpha))
    sigma[0] = 0.0
    return sigma


def build_cosine_schedule(T: int, s: float = 0.008, sigma_mode: str = "ddpm_beta") -> NoiseSchedule:
    """Cosine schedule: alpha_t = f(t)/f(t-1) floored at 0.001, alpha_bar = running product.

    ``f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)``. Where no clipping is active
    ``alpha_bar[t] == f(t)/f(0)``.
    """
    if T < 1 or s <= 0:
        raise ValueError("need T >= 1 and s > 0")
    t = np.arange(0, T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2
    alpha = np.maximum(f[1:] / f[:-1], ALPHA_MIN)
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(alpha, alpha_bar, _sigma(alpha, alpha_bar, sigma_mode), np.arange(1, T + 1))


def schedule_for(cfg: DiffusionConfig) -> NoiseSchedule:
    return build_cosine_schedule(cfg.T, cfg.s_offset, cfg.sigma_mode)


def respace(sched: NoiseSchedule, steps: int, sigma_mode: str = "ddpm_beta") -> NoiseSchedule:
    """Uniform-stride subsequence of ``steps`` timesteps, with alphas recomputed from alpha_bar."""
    T = sched.T
    if steps >= T:
        return sched
    tau = np.unique(np.round(np.linspace(T / steps, T, steps)).astype(np.int64))
    alpha_bar = sched.alpha_bar[tau - 1]
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    alpha = alpha_bar / prev
    return NoiseSchedule(alpha, alpha_bar, _sigma(alpha, alpha_bar, sigma_mode), sched.timesteps[tau - 1])


def forward_noise(x0, t: int, eps, sched: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    ab = sched.ab(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def reverse_step(x_t, t: int, eps_pred, z, sched: NoiseSchedule):
    """One ancestral denoising step; no noise is injected at t = 1."""
    a = float(sched.alpha[t - 1])
    ab = sched.ab(t)
    sigma = 0.0 if t == 1 else float(sched.sigma[t - 1])
    mean = (x_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(a)
    return mean + sigma * z if sigma else mean


def ddpm_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every coordinate."""
    if eps_pred.shape != eps_true.shape:
        raise ValueError(f"ddpm_loss: shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}")
    return (eps_pred - eps_true).pow(2).mean()


def combined_loss(lm_nll: torch.Tensor, ddpm_mse: torch.Tensor, lam: float) -> torch.Tensor:
    """mean(lm_nll over text targets) + lam * mean(per-image DDPM MSE); empty terms count as 0."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    lm = lm_nll.mean() if lm_nll.numel() else lm_nll.new_zeros(())
    dd = ddpm_mse.mean() if ddpm_mse.numel() else ddpm_mse.new_zeros(())
    return lm + lam * dd


def cfg_combine(eps_cond, eps_uncond, w: float):
    if w < 0:
        raise ValueError("guidance scale must be >= 0")
    return eps_uncond + w * (eps_cond - eps_uncond)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of integer timesteps; shape ``t.shape + (dim,)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb
