"""
Noise predictor ε_θ(z_t, t, c).

A two-level convolutional encoder-decoder (widths 32 and 64) with one text
cross-attention block at the 4x4 bottleneck and sinusoidal timestep
conditioning. Group normalisation keeps every sample independent of the rest
of the batch.
"""

import logging
import math
from typing import Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger("aligndiff")

ARCH_VERSION = "unet2-xattn1"
MAX_PERIOD = 10_000.0


def cross_attention(
    queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor
) -> torch.Tensor:
    """softmax(Q Kᵀ / √d_k) V, softmax taken row-wise.

    Accepts unbatched [n, d_k], [m, d_k], [m, d_v] or batched inputs with the same
    leading dimensions. Every output row is a convex combination of value rows.
    """
    d_k = queries.shape[-1]
    if d_k == 0:
        raise ValueError("key dimension must be positive")
    if keys.shape[-1] != d_k:
        raise ValueError(f"query/key width mismatch: {d_k} vs {keys.shape[-1]}")
    if keys.shape[-2] == 0:
        raise ValueError("no tokens to attend to; supply a null token instead")
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError("keys and values must have the same number of tokens")
    logits = queries @ keys.transpose(-1, -2) / math.sqrt(d_k)
    return torch.softmax(logits, dim=-1) @ values


def attention_weights(queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
    """Row-stochastic attention matrix used by `cross_attention`."""
    return torch.softmax(queries @ keys.transpose(-1, -2) / math.sqrt(queries.shape[-1]), dim=-1)


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Interleaved [sin(ω_0 t), cos(ω_0 t), sin(ω_1 t), ...].

    Frequencies are geometric from ω_0 = 1 down to 1/MAX_PERIOD. Accepts a scalar
    step (returns [dim]) or a tensor of steps [B] (returns [B, dim]).
    """
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    half = dim // 2
    exponent = torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    freqs = MAX_PERIOD ** (-exponent)
    steps = torch.as_tensor(t, dtype=torch.float64)
    angles = steps.unsqueeze(-1) * freqs
    emb = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return emb.flatten(-2)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttentionBlock(nn.Module):
    """Feature-map queries attending over the text token sequence."""

    def __init__(self, channels: int, text_dim: int, key_dim: int, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, key_dim, bias=False)
        self.to_k = nn.Linear(text_dim, key_dim, bias=False)
        self.to_v = nn.Linear(text_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # [B, HW, C]
        attended = cross_attention(self.to_q(tokens), self.to_k(context), self.to_v(context))
        out = self.to_out(attended).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class Denoiser(nn.Module):
    """ε_θ for latents of shape (latent_channels, 16, 16).

    Parameters
    ----------
        latent_channels : int, default=12
            channels of the codec latent
        channels : tuple, default=(32, 64)
            feature widths of the two resolution levels
        text_dim : int, default=64
            width d_t of the conditioning token embeddings
        key_dim : int, default=64
            shared key dimension d_k of the cross-attention block
        time_dim : int, default=128
            width of the timestep embedding MLP
    """

    def __init__(
        self,
        latent_channels: int = 12,
        channels: Sequence[int] = (32, 64),
        text_dim: int = 64,
        key_dim: int = 64,
        time_dim: int = 128,
        groups: int = 8,
    ):
        super().__init__()
        c0, c1 = channels
        self.latent_channels = latent_channels
        self.channels: Tuple[int, int] = (c0, c1)
        self.text_dim = text_dim
        self.sinusoid_dim = c0
        self.time_mlp = nn.Sequential(
            nn.Linear(c0, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = nn.Conv2d(latent_channels, c0, 3, padding=1)
        self.down0 = ResBlock(c0, c0, time_dim, groups)
        self.pool0 = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1 = ResBlock(c0, c1, time_dim, groups)
        self.pool1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.mid_in = ResBlock(c1, c1, time_dim, groups)
        self.attn = CrossAttentionBlock(c1, text_dim, key_dim, groups)
        self.mid_out = ResBlock(c1, c1, time_dim, groups)
        self.up1 = ResBlock(c1 + c1, c1, time_dim, groups)
        self.up0 = ResBlock(c1 + c0, c0, time_dim, groups)
        self.norm_out = nn.GroupNorm(groups, c0)
        self.conv_out = nn.Conv2d(c0, latent_channels, 3, padding=1)

    @property
    def dtype(self) -> torch.dtype:
        return self.conv_in.weight.dtype

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if z_t.ndim != 4 or z_t.shape[1] != self.latent_channels:
            raise ValueError(f"expected latents [B, {self.latent_channels}, H, W], got {tuple(z_t.shape)}")
        if z_t.shape[-1] % 4 or z_t.shape[-2] % 4:
            raise ValueError("latent height and width must be divisible by 4")
        if t.shape != (z_t.shape[0],) or context.shape[0] != z_t.shape[0]:
            raise ValueError("batch sizes of latents, steps and context must agree")
        if context.shape[-1] != self.text_dim:
            raise ValueError(f"context width {context.shape[-1]} != text_dim {self.text_dim}")

        temb = self.time_mlp(timestep_embedding(t, self.sinusoid_dim).to(z_t.dtype))
        h0 = self.down0(self.conv_in(z_t), temb)
        h1 = self.down1(self.pool0(h0), temb)
        h = self.mid_in(self.pool1(h1), temb)
        h = self.attn(h, context)
        h = self.mid_out(h, temb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1(torch.cat([h, h1], dim=1), temb)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up0(torch.cat([h, h0], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def build_denoiser(seed: int, **kwargs) -> Denoiser:
    """Denoiser with parameters drawn from a generator seeded by `seed`.

    The global torch RNG state is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Denoiser(**kwargs)
    logger.debug(
        "Built denoiser %s with %d parameters",
        ARCH_VERSION,
        sum(p.numel() for p in model.parameters()),
    )
    return model


def denoise(model: Denoiser, z_t: torch.Tensor, t: torch.Tensor, cond) -> torch.Tensor:
    """Predicted noise for a latent batch under a conditioning batch."""
    if cond.batch_size != z_t.shape[0]:
        raise ValueError(
            f"conditioning batch {cond.batch_size} does not match latent batch {z_t.shape[0]}"
        )
    return model(z_t, t, cond.sequence_embeddings)
