"""
Relational alignment losses.

Semantic consistency compares the cosine geometry of visual features with the
geometry of the pooled caption features. Category guidance compares it with
the geometry of the category features, weighting each pair by how typical the
pair's captions are of their categories.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import torch

from .diffusion import NoiseSchedule, predict_clean_latent

logger = logging.getLogger("aligndiff")

NORM_EPS = 1e-12


def cosine_matrix(x: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity of the rows of x [B, d].

    Raises on any row with norm <= 1e-12; a collapsed feature row is surfaced
    rather than patched.
    """
    if x.ndim != 2:
        raise ValueError(f"features must be [B, d], got {tuple(x.shape)}")
    norms = torch.linalg.vector_norm(x, dim=1)
    if bool((norms <= NORM_EPS).any()):
        bad = torch.nonzero(norms <= NORM_EPS).flatten().tolist()
        raise ValueError(f"zero-norm feature rows {bad}")
    unit = x / norms.unsqueeze(1)
    sim = unit @ unit.T
    return ((sim + sim.T) / 2).clamp(-1.0, 1.0)


def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{what} must be square, got {tuple(a.shape)}")
    if a.shape != b.shape:
        raise ValueError(f"{what} size mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def corr_loss(mz: torch.Tensor, mt: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between visual and text similarity matrices."""
    _check_pair(mz, mt, "similarity matrices")
    return ((mz - mt) ** 2).mean()


def cate_loss(mz: torch.Tensor, mc: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Typicality-weighted mean squared difference between visual and category similarity."""
    _check_pair(mz, mc, "similarity matrices")
    _check_pair(mz, w, "weight matrix")
    if bool(((w < 0) | (w > 1)).any()):
        raise ValueError("pair weights must lie in [0, 1]")
    return (w * (mz - mc) ** 2).mean()


def support_score(c: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Cosine between category feature(s) c and text feature(s) t along the last axis."""
    if c.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(c.shape)} vs {tuple(t.shape)}")
    nc = torch.linalg.vector_norm(c, dim=-1)
    nt = torch.linalg.vector_norm(t, dim=-1)
    if bool((nc <= NORM_EPS).any()) or bool((nt <= NORM_EPS).any()):
        raise ValueError("support score of a zero vector")
    return ((c * t).sum(dim=-1) / (nc * nt)).clamp(-1.0, 1.0)


@dataclass(frozen=True)
class TypicalityStats:
    """Global statistics of pair scores A_ij = s_i + s_j."""

    mu: float
    sigma: float
    sample_count: int

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ValueError("typicality statistics must be finite")
        if self.sigma <= 0:
            raise ValueError(f"typicality sigma must be positive, got {self.sigma}")

    def to_dict(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma, "sample_count": self.sample_count}

    @classmethod
    def from_dict(cls, d: dict) -> "TypicalityStats":
        return cls(float(d["mu"]), float(d["sigma"]), int(d["sample_count"]))


class TypicalityAccumulator:
    """Streaming mean/variance of per-sample support scores.

    Uses the pairwise-combinable form of Welford's update, so partial
    accumulators built on disjoint shards can be merged in any order.
    """

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, scores: Iterable[float]) -> "TypicalityAccumulator":
        if isinstance(scores, torch.Tensor):
            scores = scores.detach().cpu().numpy()
        elif not isinstance(scores, np.ndarray):
            scores = list(scores)
        values = np.asarray(scores, dtype=np.float64).ravel()
        if values.size == 0:
            return self
        if not np.all(np.isfinite(values)):
            raise ValueError("support scores must be finite")
        batch = TypicalityAccumulator()
        batch.count = int(values.size)
        batch.mean = float(values.mean())
        batch.m2 = float(((values - batch.mean) ** 2).sum())
        return self.merge(batch)

    def merge(self, other: "TypicalityAccumulator") -> "TypicalityAccumulator":
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        self.mean = self.mean + delta * other.count / n
        self.count = n
        return self

    def finalize(self) -> TypicalityStats:
        """Pair statistics μ = 2μ_s, σ = √2·σ_s from the per-sample population moments."""
        if self.count < 2:
            raise ValueError(f"need at least 2 support scores, got {self.count}")
        var = self.m2 / self.count
        # rounding leaves a tiny residue when every score is equal
        if var <= (1e-12 * max(1.0, abs(self.mean))) ** 2:
            raise ValueError("all support scores are identical; the text encoder is degenerate")
        sigma_s = math.sqrt(var)
        return TypicalityStats(mu=2.0 * self.mean, sigma=math.sqrt(2.0) * sigma_s, sample_count=self.count)


def estimate_typicality_stats(scores: Iterable[float]) -> TypicalityStats:
    return TypicalityAccumulator().update(scores).finalize()


def typicality_weight(a, stats: Optional[TypicalityStats]):
    """sigmoid((A - μ) / σ); works on floats and tensors."""
    if stats is None:
        raise ValueError("typicality statistics have not been estimated")
    if isinstance(a, torch.Tensor):
        return torch.sigmoid((a - stats.mu) / stats.sigma)
    z = (float(a) - stats.mu) / stats.sigma
    # numerically stable on both tails
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def pair_weights(scores: torch.Tensor, stats: TypicalityStats) -> torch.Tensor:
    """W_ij from per-sample support scores [B]. Weights are treated as constants."""
    s = scores.detach()
    return typicality_weight(s[:, None] + s[None, :], stats)


def visual_features(
    z_t: torch.Tensor, t, eps_pred: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Spatially pooled estimate of the clean latent, one d_v = C vector per sample."""
    z0_hat = predict_clean_latent(schedule, z_t, t, eps_pred)
    return z0_hat.mean(dim=(-2, -1))
