"""
Noise schedule and forward/reverse diffusion math.

Timesteps are 1-based throughout: t = 1..T, and array index t - 1 holds the
values of step t. All latent operations accept a single grid (C, H, W) or a
batch (B, C, H, W); per-sample steps are passed as an integer tensor of length B.

Usage:
    schedule = build_schedule(1000, 1e-4, 0.02)
    z_t = forward_sample(schedule, z0, t, noise)
    latents = sample(denoiser, schedule, cond, steps=50, guidance=7.5, seed=7)
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger("aligndiff")

DEFAULT_NUM_TIMESTEPS = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02

StepIndex = Union[int, torch.Tensor]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed per-step variances.

    Parameters
    ----------
        beta : np.ndarray
            float64 array[T] of noise variances, each in (0, 1)
        alpha : np.ndarray
            1 - beta
        alpha_bar : np.ndarray
            cumulative products of alpha, strictly decreasing in (0, 1)
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if not self.beta.shape == self.alpha.shape == self.alpha_bar.shape:
            raise ValueError("beta, alpha and alpha_bar must have the same length")
        if self.beta.ndim != 1 or self.beta.size == 0:
            raise ValueError("A schedule needs at least one step")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("beta must lie in (0, 1)")
        if np.any(self.alpha_bar <= 0) or np.any(self.alpha_bar >= 1):
            raise ValueError("alpha_bar must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:  # pylint: disable=invalid-name
        return int(self.beta.size)

    def alpha_bar_prev(self) -> np.ndarray:
        """ᾱ_{t-1} for t = 1..T, with ᾱ_0 = 1."""
        return np.concatenate(([1.0], self.alpha_bar[:-1]))

    def posterior_std(self) -> np.ndarray:
        """σ_t of the reverse update; σ_1 = 0 so the final step is deterministic."""
        prev = self.alpha_bar_prev()
        var = self.beta * (1.0 - prev) / (1.0 - self.alpha_bar)
        var[0] = 0.0
        return np.sqrt(var)


def build_schedule(
    T: int = DEFAULT_NUM_TIMESTEPS,  # pylint: disable=invalid-name
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> NoiseSchedule:
    """Linear schedule β_t = β_min + (t/T)(β_max - β_min), t = 1..T.

    Parameters:
        T (int): number of diffusion steps, >= 1
        beta_min (float): smallest variance, > 0
        beta_max (float): largest variance, < 1 and >= beta_min

    Returns:
        NoiseSchedule: float64 schedule arrays
    """
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(
            f"Need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    frac = np.arange(1, T + 1, dtype=np.float64) / T
    # written as a convex combination so that β_T == beta_max exactly
    beta = beta_min * (1.0 - frac) + beta_max * frac
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def respace(schedule: NoiseSchedule, timesteps: Sequence[int]) -> NoiseSchedule:
    """Schedule restricted to an ascending subset of timesteps.

    Step k of the result jumps from timestep timesteps[k-1] to timesteps[k-2]
    (or to the clean latent for k = 1) with β'_k = 1 - ᾱ_{t_k} / ᾱ_{t_(k-1)}.
    """
    steps = [int(t) for t in timesteps]
    if not steps:
        raise ValueError("timesteps must not be empty")
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError("timesteps must be strictly ascending")
    if steps[0] < 1 or steps[-1] > schedule.T:
        raise ValueError(f"timesteps must lie in 1..{schedule.T}")
    if steps == list(range(1, schedule.T + 1)):
        return schedule
    alpha_bar = schedule.alpha_bar[np.asarray(steps) - 1]
    alpha = alpha_bar / np.concatenate(([1.0], alpha_bar[:-1]))
    return NoiseSchedule(beta=1.0 - alpha, alpha=alpha, alpha_bar=alpha_bar.copy())


def inference_timesteps(T: int, steps: int) -> List[int]:  # pylint: disable=invalid-name
    """Uniformly strided descending subset of 1..T with `steps` entries."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must lie in 1..{T}, got {steps}")
    if steps == 1:
        return [T]
    grid = np.round(np.linspace(T, 1, steps)).astype(int)
    return [int(t) for t in grid]


def _check_steps(schedule: NoiseSchedule, t: StepIndex) -> None:
    if isinstance(t, torch.Tensor):
        lo, hi = int(t.min()), int(t.max())
    else:
        lo = hi = int(t)
    if lo < 1 or hi > schedule.T:
        raise ValueError(f"step index out of range 1..{schedule.T}: {t}")


def _coef(values: np.ndarray, t: StepIndex, like: torch.Tensor) -> torch.Tensor:
    """Gathers schedule values at step(s) t, shaped to broadcast against `like`."""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if like.ndim < 2 or t.shape[0] != like.shape[0]:
            raise ValueError("per-sample steps need a batch with a matching leading dimension")
        return table[t.long() - 1].reshape(-1, *([1] * (like.ndim - 1)))
    return table[int(t) - 1]


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_sample(
    schedule: NoiseSchedule, z0: torch.Tensor, t: StepIndex, noise: torch.Tensor
) -> torch.Tensor:
    """Closed-form perturbation z_t = √ᾱ_t z0 + √(1 - ᾱ_t) ε.

    The noise is drawn by the caller so results are reproducible.
    """
    _check_same_shape(z0, noise, "noise")
    _check_steps(schedule, t)
    sqrt_ab = _coef(np.sqrt(schedule.alpha_bar), t, z0)
    sqrt_omab = _coef(np.sqrt(1.0 - schedule.alpha_bar), t, z0)
    return sqrt_ab * z0 + sqrt_omab * noise


def predict_clean_latent(
    schedule: NoiseSchedule, z_t: torch.Tensor, t: StepIndex, eps_pred: torch.Tensor
) -> torch.Tensor:
    """Inverts `forward_sample` given a noise estimate: ẑ0 = (z_t - √(1-ᾱ_t) ε̂) / √ᾱ_t."""
    _check_same_shape(z_t, eps_pred, "eps_pred")
    _check_steps(schedule, t)
    sqrt_ab = _coef(np.sqrt(schedule.alpha_bar), t, z_t)
    sqrt_omab = _coef(np.sqrt(1.0 - schedule.alpha_bar), t, z_t)
    return (z_t - sqrt_omab * eps_pred) / sqrt_ab


def denoising_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """Mean squared error over batch and elements."""
    _check_same_shape(eps_pred, eps_true, "eps")
    return F.mse_loss(eps_pred, eps_true, reduction="mean")


def reverse_step(
    schedule: NoiseSchedule,
    z_t: torch.Tensor,
    t: StepIndex,
    eps_pred: torch.Tensor,
    injected_noise: torch.Tensor,
) -> torch.Tensor:
    """One ancestral update z_t -> z_{t-1}.

    z_{t-1} = (z_t - β_t/√(1-ᾱ_t) ε̂) / √α_t + σ_t ξ with the DDPM posterior
    σ_t² = β_t (1-ᾱ_{t-1}) / (1-ᾱ_t); σ_1 = 0, so `injected_noise` is ignored at t = 1.
    """
    _check_same_shape(z_t, eps_pred, "eps_pred")
    _check_same_shape(z_t, injected_noise, "injected_noise")
    _check_steps(schedule, t)
    inv_sqrt_alpha = _coef(1.0 / np.sqrt(schedule.alpha), t, z_t)
    eps_coef = _coef(schedule.beta / np.sqrt(1.0 - schedule.alpha_bar), t, z_t)
    sigma = _coef(schedule.posterior_std(), t, z_t)
    mean = inv_sqrt_alpha * (z_t - eps_coef * eps_pred)
    return mean + sigma * injected_noise


def posterior_mean(
    schedule: NoiseSchedule, z0_hat: torch.Tensor, z_t: torch.Tensor, t: StepIndex
) -> torch.Tensor:
    """Mean of q(z_{t-1} | z_t, ẑ0).

    √ᾱ_{t-1} β_t / (1-ᾱ_t) · ẑ0 + √α_t (1-ᾱ_{t-1}) / (1-ᾱ_t) · z_t; with the unclipped
    ẑ0 of `predict_clean_latent` this equals the mean of `reverse_step`.
    """
    _check_same_shape(z_t, z0_hat, "z0_hat")
    _check_steps(schedule, t)
    prev = schedule.alpha_bar_prev()
    denom = 1.0 - schedule.alpha_bar
    clean_coef = _coef(np.sqrt(prev) * schedule.beta / denom, t, z_t)
    noisy_coef = _coef(np.sqrt(schedule.alpha) * (1.0 - prev) / denom, t, z_t)
    return clean_coef * z0_hat + noisy_coef * z_t


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, g: float) -> torch.Tensor:
    """Classifier-free guidance: ε_u + g (ε_c - ε_u)."""
    _check_same_shape(eps_cond, eps_uncond, "eps")
    if g < 0:
        raise ValueError(f"guidance scale must be >= 0, got {g}")
    if g == 1:
        return eps_cond.clone()
    if g == 0:
        return eps_uncond.clone()
    return eps_uncond + g * (eps_cond - eps_uncond)


Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@torch.no_grad()
def sample(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    cond,
    steps: int = 50,
    guidance: float = 7.5,
    seed: int = 0,
    latent_shape: Sequence[int] = (12, 16, 16),
    clip_latent: Optional[float] = 1.0,
) -> torch.Tensor:
    """Ancestral sampling with classifier-free guidance.

    Parameters:
        denoiser: callable (z_t, t, context) -> predicted noise, with t a long tensor[B]
        schedule (NoiseSchedule): training schedule
        cond: conditioning batch providing `sequence_embeddings` [B, L, d] and
            `null_sequence` [L, d]
        steps (int): number of reverse steps, a uniformly strided subset of 1..T
        guidance (float): guidance scale g >= 0
        seed (int): seed of the generator for z_T and all injected noise
        latent_shape (tuple): (C, H, W) of one latent
        clip_latent (float): clamp the clean-latent estimate of every step to
            [-clip_latent, clip_latent] and step to the posterior mean around it;
            None takes the plain noise-space update

    Returns:
        torch.Tensor: latents [B, C, H, W]
    """
    if clip_latent is not None and clip_latent <= 0:
        raise ValueError(f"clip_latent must be positive, got {clip_latent}")
    timesteps = inference_timesteps(schedule.T, steps)
    reduced = respace(schedule, timesteps[::-1])
    context = cond.sequence_embeddings
    batch = context.shape[0]
    null = cond.null_sequence.unsqueeze(0).expand(batch, -1, -1)
    generator = torch.Generator()
    generator.manual_seed(int(seed))

    z = torch.randn((batch, *latent_shape), generator=generator, dtype=context.dtype)
    logger.info("Sampling %d latents over %d steps, guidance %.2f", batch, steps, guidance)
    for i, t in enumerate(timesteps):
        k = len(timesteps) - i
        t_batch = torch.full((batch,), t, dtype=torch.long)
        if guidance == 1:
            eps = denoiser(z, t_batch, context)
        else:
            both = denoiser(
                torch.cat([z, z]), torch.cat([t_batch, t_batch]), torch.cat([context, null])
            )
            eps_cond, eps_uncond = both.chunk(2)
            eps = cfg_combine(eps_cond, eps_uncond, guidance)
        if k > 1:
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        else:
            noise = torch.zeros_like(z)
        if clip_latent is None:
            z = reverse_step(reduced, z, k, eps, noise)
        else:
            z0_hat = predict_clean_latent(reduced, z, k, eps).clamp(-clip_latent, clip_latent)
            z = posterior_mean(reduced, z0_hat, z, k) + _coef(reduced.posterior_std(), k, z) * noise
    return z
