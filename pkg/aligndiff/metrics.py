"""
Evaluation metrics for generated images.

Distribution and semantic metrics work on provider embeddings (see
`embeddings.py`); image-quality metrics work on pixels in [0, 1].
"""

import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.spatial.distance import cdist
from sklearn.metrics import accuracy_score, f1_score, silhouette_score

from .codec import check_image
from .conditioning import split_words
from .corpus import format_caption, infer_buckets, parse_caption
from .embeddings import EmbeddingProvider, luminance

logger = logging.getLogger("aligndiff")

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0
EXHAUSTIVE_ALIGNMENT_LIMIT = 16


@dataclass(frozen=True, eq=False)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"need at least 2 samples, got {self.n}")
        if self.cov.shape != (self.d, self.d):
            raise ValueError("covariance shape does not match the mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-9, rtol=0.0):
            raise ValueError("covariance must be symmetric")

    @property
    def d(self) -> int:
        return int(self.mean.shape[0])


def gaussian_stats(embeddings: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased (1/(n-1)) covariance of the rows."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"embeddings must be [n, d], got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain non-finite values")
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return GaussianStats(mean=x.mean(axis=0), cov=(cov + cov.T) / 2.0, n=x.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to 0."""
    w, v = linalg.eigh((mat + mat.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(r: GaussianStats, s: GaussianStats) -> float:
    """‖μ_r - μ_s‖² + Tr(Σ_r + Σ_s - 2 (Σ_r^½ Σ_s Σ_r^½)^½)."""
    if r.d != s.d:
        raise ValueError(f"dimension mismatch: {r.d} vs {s.d}")
    for stats in (r, s):
        if not (np.all(np.isfinite(stats.mean)) and np.all(np.isfinite(stats.cov))):
            raise ValueError("Gaussian statistics contain non-finite values")
    diff = r.mean - s.mean
    root_r = _psd_sqrt(r.cov)
    inner = root_r @ s.cov @ root_r
    w = linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_covmean = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    fd = float(diff @ diff) + float(np.trace(r.cov)) + float(np.trace(s.cov)) - 2.0 * tr_covmean
    return max(fd, 0.0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def plip_i(f_r: np.ndarray, f_s: np.ndarray) -> float:
    """Image-image agreement of a real and a synthetic embedding."""
    return cosine(f_r, f_s)


def plip_t(t: np.ndarray, f_s: np.ndarray) -> float:
    """Text-image agreement of a prompt embedding and a synthetic image embedding."""
    return cosine(t, f_s)


def silhouette(points: np.ndarray, labels: Sequence[int]) -> float:
    """Mean silhouette with Euclidean distances; singleton clusters score 0."""
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    if x.shape[0] < 2:
        raise ValueError("silhouette needs at least 2 points")
    if labels.shape != (x.shape[0],):
        raise ValueError("one label per point is required")
    n_clusters = np.unique(labels).size
    if n_clusters < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    if n_clusters == x.shape[0]:
        return 0.0
    dist = cdist(x, x, metric="euclidean")
    return float(silhouette_score(dist, labels, metric="precomputed"))


def recall_at_k(
    query_embeds: np.ndarray,
    gallery_embeds: np.ndarray,
    ground_truth: Sequence[int],
    k: int = 5,
) -> float:
    """Fraction of queries whose counterpart ranks in the top k by cosine.

    Ties are broken by ascending gallery index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query_embeds, dtype=np.float64)
    g = np.asarray(gallery_embeds, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ValueError("gallery is empty")
    gt = np.asarray(ground_truth, dtype=np.int64)
    if gt.shape != (q.shape[0],):
        raise ValueError("one ground-truth index per query is required")
    if q.shape[0] == 0:
        raise ValueError("no queries")
    if gt.min() < 0 or gt.max() >= g.shape[0]:
        raise ValueError("ground-truth index outside the gallery")
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(gn == 0):
        raise ValueError("zero-norm embedding in retrieval")
    sim = (q / qn) @ (g / gn).T
    order = np.argsort(-sim, axis=1, kind="stable")
    ranks = np.argmax(order == gt[:, None], axis=1)
    return float(np.mean(ranks < k))


def _check_labels(pred: Sequence[int], true: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("empty label arrays")
    return pred, true


def accuracy(pred: Sequence[int], true: Sequence[int]) -> float:
    pred, true = _check_labels(pred, true)
    return float(accuracy_score(true, pred))


def f1(pred: Sequence[int], true: Sequence[int], n_classes: Optional[int] = None) -> float:
    """Binary F1 for two classes, macro F1 over the classes otherwise.

    With `n_classes` the classes are 0..n_classes-1 whatever the labels happen to
    contain; a declared class with no predicted and no actual members scores 0,
    and predictions outside the range (such as -1) only count as misses. Without
    it the classes are the observed labels, binary when they are exactly {0, 1}.
    """
    pred, true = _check_labels(pred, true)
    if n_classes is None:
        classes = set(np.unique(np.concatenate([pred, true])).tolist())
        average = "binary" if classes == {0, 1} else "macro"
        return float(f1_score(true, pred, average=average, zero_division=0))
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if n_classes == 2:
        return float(f1_score(true, pred, labels=[1], average="macro", zero_division=0))
    return float(f1_score(true, pred, labels=list(range(n_classes)), average="macro", zero_division=0))


def _min_chunk_alignment(cand: Sequence[str], ref: Sequence[str]) -> Tuple[int, int]:
    """(matches, chunks) maximizing matches, then minimizing chunks."""

    @lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int) -> Tuple[int, int]:
        if i == len(cand):
            return 0, 0
        m, c = best(i + 1, used, -1)
        result = (m, -c)
        for j, word in enumerate(ref):
            if word != cand[i] or used >> j & 1:
                continue
            m, c = best(i + 1, used | 1 << j, j)
            c += 0 if prev >= 0 and j == prev + 1 else 1
            result = max(result, (m + 1, -c))
        return result[0], -result[1]

    return best(0, 0, -1)


def _greedy_alignment(cand: List[str], ref: List[str]) -> Tuple[int, int]:
    used = [False] * len(ref)
    matches, chunks, prev = 0, 0, -1
    for word in cand:
        options = [j for j, w in enumerate(ref) if w == word and not used[j]]
        if not options:
            prev = -1
            continue
        j = prev + 1 if prev + 1 in options else options[0]
        used[j] = True
        matches += 1
        chunks += 0 if prev >= 0 and j == prev + 1 else 1
        prev = j
    return matches, chunks


def meteor_lite(candidate: str, reference: str) -> float:
    """Exact-match METEOR: F = 10PR/(R+9P), penalty 0.5·(chunks/m)³."""
    cand, ref = split_words(candidate), split_words(reference)
    if not cand or not ref:
        return 0.0
    if len(ref) <= EXHAUSTIVE_ALIGNMENT_LIMIT:
        m, chunks = _min_chunk_alignment(tuple(cand), tuple(ref))
    else:
        m, chunks = _greedy_alignment(cand, ref)
    if m == 0:
        return 0.0
    precision, recall = m / len(cand), m / len(ref)
    fmean = precision * recall / (METEOR_ALPHA * precision + (1 - METEOR_ALPHA) * recall)
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return float(fmean * (1.0 - penalty))


def _check_image_pair(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image dimension mismatch: {x.shape} vs {y.shape}")
    for img in (x, y):
        if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("image values must be finite and lie in [0, 1]")
    return x, y


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Single-window SSIM over the luminance of the whole image."""
    x, y = _check_image_pair(x, y)
    lx, ly = (luminance(x), luminance(y)) if x.ndim == 3 else (x, y)
    mx, my = lx.mean(), ly.mean()
    vx, vy = lx.var(), ly.var()
    cxy = ((lx - mx) * (ly - my)).mean()
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(num / den)


def mse(x: np.ndarray, y: np.ndarray) -> float:
    x, y = _check_image_pair(x, y)
    return float(np.mean((x - y) ** 2))


def ncc(x: np.ndarray, y: np.ndarray) -> float:
    """Normalized cross-correlation of mean-centered luminance."""
    x, y = _check_image_pair(x, y)
    lx, ly = (luminance(x), luminance(y)) if x.ndim == 3 else (x, y)
    lx, ly = lx - lx.mean(), ly - ly.mean()
    denom = math.sqrt(float((lx**2).sum()) * float((ly**2).sum()))
    if denom == 0.0:
        raise ValueError("NCC is undefined for a constant image")
    return float(np.clip((lx * ly).sum() / denom, -1.0, 1.0))


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """10·log10(MAX² / MSE) with MAX = 1; +inf for identical images."""
    err = mse(x, y)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / err))


def match_pairs(real_captions: Sequence[str], synth_prompts: Sequence[str]) -> List[Tuple[int, int]]:
    """Pairs each synthetic image with the next unused real image of the same caption.

    Returns (real_index, synth_index) in synthetic order; unmatched images are skipped.
    """
    pending: Dict[str, List[int]] = {}
    for i, text in enumerate(real_captions):
        pending.setdefault(" ".join(split_words(text)), []).append(i)
    pairs = []
    for j, text in enumerate(synth_prompts):
        queue = pending.get(" ".join(split_words(text)))
        if queue:
            pairs.append((queue.pop(0), j))
    return pairs


@dataclass
class MetricReport:
    """Rows of (metric, dataset, value) in insertion order."""

    provider: str
    seed: Optional[int]
    rows: List[Tuple[str, str, float]] = field(default_factory=list)

    def add(self, metric: str, dataset: str, value: float) -> None:
        self.rows.append((metric, dataset, float(value)))

    def get(self, metric: str, dataset: str) -> float:
        for m, d, v in self.rows:
            if m == metric and d == dataset:
                return v
        raise KeyError(f"{metric}/{dataset}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["metric", "dataset", "value"])

    def to_dict(self) -> dict:
        nested: Dict[str, Dict[str, float]] = {}
        for metric, dataset, value in self.rows:
            nested.setdefault(dataset, {})[metric] = value
        return {"provider": self.provider, "seed": self.seed, "metrics": nested}

    def write(self, path: Union[str, Path]) -> Path:
        """Writes CSV or JSON depending on the suffix."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        elif path.suffix == ".csv":
            self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
        else:
            raise ValueError(f"report must end in .csv or .json, got {path.name}")
        return path


def _categories(captions: Sequence[str]) -> Optional[np.ndarray]:
    try:
        return np.array([parse_caption(c).category for c in captions])
    except ValueError:
        return None


def evaluate_sets(
    real_images: Sequence[np.ndarray],
    real_captions: Sequence[str],
    synth_images: Sequence[np.ndarray],
    synth_prompts: Sequence[str],
    provider: EmbeddingProvider,
    n_categories: int = 4,
    seed: Optional[int] = None,
    text_metrics: Optional[bool] = None,
    k: int = 5,
) -> MetricReport:
    """Builds the full report comparing a synthetic set with a real one.

    Parameters
    ----------
        text_metrics : bool, optional
            compute PLIP-T and retrieval; None means "if the provider supports text",
            True with an image-only provider raises ValueError
    """
    if text_metrics is None:
        text_metrics = provider.supports_text
    if text_metrics and not provider.supports_text:
        raise ValueError(f"PLIP-T needs a text-capable provider; '{provider.name}' is image-only")
    if len(real_images) < 2 or len(synth_images) < 2:
        raise ValueError("both image sets need at least 2 images")

    report = MetricReport(provider=provider.name, seed=seed)
    f_real = provider.embed_images(real_images)
    f_synth = provider.embed_images(synth_images)
    report.add("fid", "synth_vs_real", frechet_distance(gaussian_stats(f_real), gaussian_stats(f_synth)))

    pairs = match_pairs(real_captions, synth_prompts)
    logger.info("Matched %d of %d synthetic images to real captions", len(pairs), len(synth_images))
    if pairs:
        report.add("plip_i", "paired", float(np.mean([plip_i(f_real[i], f_synth[j]) for i, j in pairs])))

    if text_metrics:
        t_synth = provider.embed_texts(synth_prompts)
        t_real = provider.embed_texts(real_captions)
        report.add("plip_t", "synth", float(np.mean([plip_t(t, f) for t, f in zip(t_synth, f_synth)])))
        report.add("plip_t", "real", float(np.mean([plip_t(t, f) for t, f in zip(t_real, f_real)])))
        truth = np.arange(len(synth_images))
        report.add(f"r@{k}_image_to_text", "synth", recall_at_k(f_synth, t_synth, truth, k))
        report.add(f"r@{k}_text_to_image", "synth", recall_at_k(t_synth, f_synth, truth, k))

    for name, feats, texts in (("real", f_real, real_captions), ("synth", f_synth, synth_prompts)):
        labels = _categories(texts)
        if labels is not None and np.unique(labels).size >= 2:
            report.add("silhouette", name, silhouette(feats, labels))

    prompted = _categories(synth_prompts)
    if prompted is not None:
        inferred = [infer_buckets(img, n_categories) for img in synth_images]
        report.add("accuracy", "synth", accuracy([b[0] for b in inferred], prompted))
        report.add("f1", "synth", f1([b[0] for b in inferred], prompted, n_classes=n_categories))
        report.add(
            "meteor",
            "synth",
            float(np.mean([meteor_lite(format_caption(*b), p) for b, p in zip(inferred, synth_prompts)])),
        )

    if pairs:
        quality = {"ssim": [], "mse": [], "psnr": [], "ncc": []}
        for i, j in pairs:
            x, y = check_image(real_images[i]), check_image(synth_images[j])
            quality["ssim"].append(ssim(x, y))
            quality["mse"].append(mse(x, y))
            quality["psnr"].append(psnr(x, y))
            try:
                quality["ncc"].append(ncc(x, y))
            except ValueError:
                logger.warning("Skipping NCC for constant image pair (%d, %d)", i, j)
        for metric, values in quality.items():
            if values:
                report.add(metric, "paired", float(np.mean(values)))
    return report
