"""Cosine-schedule DDPM: forward noising, L1 epsilon loss, guidance, sampling.

Diffusion time t runs over [0, 1]; t = 0 is clean data. The schedule is
variance preserving with alpha_t = cos(t pi / 2) and sigma_t = sin(t pi / 2),
so alpha_t^2 = cos(t pi / 2)^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import torch

LOGSNR_MAX = 20.0


class Schedule(NamedTuple):
    alpha: float
    sigma: float
    logsnr: float
    weight: float


@dataclass(frozen=True)
class GuidanceConfig:
    cond_dropout_p: float = 0.1
    guidance_weight: float = 2.0
    # False: eps_u + w (eps_c - eps_u); True: eps_c + w (eps_c - eps_u)
    plus_one: bool = False

    def __post_init__(self):
        if not 0 <= self.cond_dropout_p < 1:
            raise ValueError("cond_dropout_p must lie in [0, 1)")
        if self.guidance_weight < 0:
            raise ValueError("guidance_weight must be >= 0")


def _check_t(t):
    if isinstance(t, torch.Tensor):
        bad = (t < 0) | (t > 1) | torch.isnan(t)
        if bool(bad.any()):
            raise ValueError("diffusion time must lie in [0, 1]")
    elif not 0.0 <= t <= 1.0:
        raise ValueError(f"diffusion time must lie in [0, 1], got {t}")


def loss_weight(t):
    return torch.ones_like(t) if isinstance(t, torch.Tensor) else 1.0


def alpha_sigma(t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    _check_t(t)
    half_pi = t * (math.pi / 2)
    alpha = torch.where(t >= 1, torch.zeros_like(t), torch.cos(half_pi))
    return alpha, torch.sin(half_pi)


def logsnr(t):
    """2 (log alpha - log sigma), clamped to [-20, 20]."""
    if isinstance(t, torch.Tensor):
        alpha, sigma = alpha_sigma(t)
        value = 2 * (torch.log(alpha) - torch.log(sigma))
        return value.clamp(-LOGSNR_MAX, LOGSNR_MAX)
    return float(logsnr(torch.tensor(float(t), dtype=torch.float64)))


def schedule_at(t: float) -> Schedule:
    _check_t(t)
    alpha = 0.0 if t >= 1 else math.cos(t * math.pi / 2)
    sigma = math.sin(t * math.pi / 2)
    return Schedule(alpha, sigma, logsnr(t), loss_weight(t))


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim())).to(like.dtype)


def q_sample(x: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Noised data alpha_t x + sigma_t eps. ``t`` is a scalar or per-example vector."""
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=torch.float64)
    alpha, sigma = alpha_sigma(t)
    return _bcast(alpha, x) * x + _bcast(sigma, x) * eps


def ddpm_loss(eps_pred: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """w_t * mean |eps_pred - eps|, averaged over the batch."""
    if eps_pred.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_pred.shape)} vs {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=eps.dtype)
    per_example = (eps_pred - eps).abs().reshape(eps.shape[0], -1).mean(dim=1) if t.dim() else \
        (eps_pred - eps).abs().mean()
    return (loss_weight(t) * per_example).mean()


def cfg_combine(eps_cond, eps_uncond, w: float, plus_one: bool = False):
    if w < 0:
        raise ValueError("guidance weight must be >= 0")
    if plus_one:
        return eps_cond + w * (eps_cond - eps_uncond)
    return eps_uncond + w * (eps_cond - eps_uncond)


Denoiser = Callable[[torch.Tensor, torch.Tensor, Optional[object]], torch.Tensor]


def _alpha_bar(t: float) -> float:
    # squared signal level from the clamped logSNR, so alpha stays > 0 at t = 1
    return 1.0 / (1.0 + math.exp(-logsnr(t)))


@torch.no_grad()
def reverse_sample(denoiser: Denoiser, conditioning, shape, num_steps: int = 1000,
                   guidance: GuidanceConfig = GuidanceConfig(), rng_seed: int = 0,
                   dtype=torch.float32, clip_x0: bool = True) -> torch.Tensor:
    """Ancestral DDPM sampling over ``num_steps`` linearly spaced times.

    ``denoiser(x_t, t, cond)`` returns the predicted noise; ``cond=None``
    requests the null-conditioned prediction used by guidance. With guidance
    weight 1 (or 0) only the conditional (or unconditional) pass runs.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    gen = torch.Generator().manual_seed(int(rng_seed) & 0xFFFF_FFFF_FFFF_FFFF)
    x = torch.randn(shape, generator=gen, dtype=dtype)
    w = guidance.guidance_weight
    for i in range(num_steps, 0, -1):
        t, s = i / num_steps, (i - 1) / num_steps
        t_vec = torch.full((shape[0],), t, dtype=dtype)
        if w == 1 and not guidance.plus_one:
            eps = denoiser(x, t_vec, conditioning)
        elif w == 0:
            eps = denoiser(x, t_vec, None)
        else:
            eps = cfg_combine(denoiser(x, t_vec, conditioning), denoiser(x, t_vec, None),
                              w, guidance.plus_one)
        ab_t, ab_s = _alpha_bar(t), _alpha_bar(s)
        a_t, sig_t = math.sqrt(ab_t), math.sqrt(1 - ab_t)
        x0 = (x - sig_t * eps) / a_t
        if clip_x0:
            x0 = x0.clamp(-1, 1)
        beta = 1 - ab_t / ab_s
        # posterior q(x_s | x_t, x0)
        coef_x0 = math.sqrt(ab_s) * beta / (1 - ab_t)
        coef_xt = math.sqrt(ab_t / ab_s) * (1 - ab_s) / (1 - ab_t)
        x = coef_x0 * x0 + coef_xt * x
        if i > 1:
            var = beta * (1 - ab_s) / (1 - ab_t)
            x = x + math.sqrt(var) * torch.randn(shape, generator=gen, dtype=dtype)
    return x.clamp(-1, 1)
