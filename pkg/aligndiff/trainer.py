"""
Two-stage training: caption-only pretraining followed by category-guided
fine-tuning, plus the sampling entry point used by the CLI and the estimator.

Every step draws its batch, timesteps, noise and caption dropout from a
generator seeded by (seed, step), so a run is a pure function of the config,
the dataset and the seed, and resuming from a checkpoint replays the same
draws an uninterrupted run would have made.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import IO, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .alignment import (
    TypicalityAccumulator,
    TypicalityStats,
    cate_loss,
    corr_loss,
    cosine_matrix,
    pair_weights,
    support_score,
    visual_features,
)
from .checkpoint import (
    Checkpoint,
    apply_optimizer_state,
    apply_params,
    collect_optimizer_state,
    collect_params,
    named_parameters,
)
from .codec import LATENT_SHAPE, decode, encode
from .conditioning import Conditioner, apply_dropout_mask, build_conditioner, caption_dropout_mask
from .corpus import CATEGORY_NAMES, SyntheticSample, parse_caption
from .denoiser import ARCH_VERSION, Denoiser, build_denoiser, denoise
from .diffusion import NoiseSchedule, build_schedule, denoising_loss, forward_sample, sample
from .errors import ConfigError, NumericalError
from .utils import derive_seed, torch_generator

logger = logging.getLogger("aligndiff")

STAGES = ("pretrain", "finetune", "two_stage")
OPTIMIZERS = ("sgd", "adam")
REQUIRED_KEYS = ("stage", "steps", "seed")
INIT_STREAM = 2**32 - 1
SAMPLE_CHUNK = 64


@dataclass
class TrainConfig:
    """Training run configuration.

    Parameters
    ----------
        stage : str
            'pretrain', 'finetune' or 'two_stage' (pretrain for `steps`, then
            finetune for `finetune_steps`)
        steps : int
            optimizer steps of the (first) stage
        seed : int
            seed of every random draw in the run
        batch_size : int, default=32
            at least 2, similarity matrices need two samples
        learning_rate : float, default=1e-3
        optimizer : str, default='adam'
            'adam' or 'sgd'; Adam moments are checkpointed so a resumed run matches
        max_grad_norm : float, default=1.0
            global gradient norm clip applied before every update, 0 disables it
        lambda_corr, lambda_cate : float, default=0.1
            weights of the semantic-consistency and category-guidance losses
        caption_dropout : float, default=0.1
            probability of training a sample on the null sequence
        data : str
            dataset directory
    """

    stage: str
    steps: int
    seed: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    lambda_corr: float = 0.1
    lambda_cate: float = 0.1
    caption_dropout: float = 0.1
    num_timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    data: str = ""
    optimizer: str = "adam"
    max_grad_norm: float = 1.0
    finetune_steps: int = 0
    log_every: int = 50
    max_length: int = 24
    text_dim: int = 64
    base_channels: int = 32
    guidance_scale: float = 7.5
    sample_steps: int = 50

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"Invalid stage '{self.stage}', choose from {STAGES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Invalid optimizer '{self.optimizer}', choose from {OPTIMIZERS}")
        if self.steps < 0 or self.finetune_steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.lambda_corr < 0 or self.lambda_cate < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.caption_dropout <= 1.0:
            raise ConfigError("caption_dropout must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_grad_norm < 0:
            raise ConfigError("max_grad_norm must be non-negative")
        if self.log_every < 1 or self.sample_steps < 1:
            raise ConfigError("log_every and sample_steps must be positive")
        if self.base_channels < 8 or self.base_channels % 8:
            raise ConfigError("base_channels must be a positive multiple of 8")
        if self.text_dim < 2 or self.text_dim % 2:
            raise ConfigError("text_dim must be a positive even integer")
        try:
            build_schedule(self.num_timesteps, self.beta_min, self.beta_max)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def architecture(self) -> dict:
        return {
            "arch_version": ARCH_VERSION,
            "latent_shape": list(LATENT_SHAPE),
            "base_channels": self.base_channels,
            "text_dim": self.text_dim,
            "max_length": self.max_length,
            "num_timesteps": self.num_timesteps,
        }

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.num_timesteps, self.beta_min, self.beta_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"Invalid key '{unknown[0]}' in config")
        return cls(**{**d, **overrides})


def _coerce(name: str, raw: str, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"Invalid value for '{name}': {raw!r}") from e


def parse_config(text: str, **overrides) -> TrainConfig:
    """Parses flat `key = value` lines; blank lines and '#' comments are ignored."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"Invalid key '{key}' in config (line {lineno})")
        if key in values:
            raise ConfigError(f"Duplicate key '{key}' in config (line {lineno})")
        values[key] = _coerce(key, raw, types[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"Missing required key '{key}' in config")
    return TrainConfig(**values)


def load_config(path: Union[str, Path], **overrides) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    return parse_config(text, **overrides)


@dataclass(frozen=True, eq=False)
class TrainingData:
    """Latents, captions and labels of a corpus, ready for batching."""

    latents: torch.Tensor
    captions: List[str]
    category_ids: torch.Tensor
    categories: List[str]

    @classmethod
    def from_samples(
        cls, samples: Sequence[SyntheticSample], categories: Optional[Sequence[str]] = None
    ) -> "TrainingData":
        if len(samples) == 0:
            raise ValueError("Training data must not be empty")
        if categories is None:
            n_categories = max(s.category_id for s in samples) + 1
            categories = CATEGORY_NAMES[: max(n_categories, 2)]
        latents = encode(np.stack([s.image for s in samples])).to(torch.float32)
        return cls(
            latents=latents,
            captions=[s.caption for s in samples],
            category_ids=torch.tensor([s.category_id for s in samples], dtype=torch.long),
            categories=list(categories),
        )

    def __len__(self) -> int:
        return int(self.latents.shape[0])


@dataclass(frozen=True, eq=False)
class BatchState:
    """Everything random about one training step."""

    z0: torch.Tensor
    t: torch.Tensor
    noise: torch.Tensor
    token_ids: torch.Tensor
    drop_mask: torch.Tensor
    category_ids: Optional[torch.Tensor] = None

    @property
    def batch_size(self) -> int:
        return int(self.z0.shape[0])


@dataclass(frozen=True, eq=False)
class LossTerms:
    l_diff: torch.Tensor
    l_corr: torch.Tensor
    l_cate: torch.Tensor
    lambda_corr: float
    lambda_cate: float
    total: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        """Logged record: each term weighted as it enters the total, so the terms sum to it."""
        return {
            "l_diff": float(self.l_diff.detach().double()),
            "l_corr": float(self.lambda_corr * self.l_corr.detach().double()),
            "l_cate": float(self.lambda_cate * self.l_cate.detach().double()),
            "total": float(self.total.detach()),
        }

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def draw_batch(
    data: TrainingData,
    conditioner: Conditioner,
    schedule: NoiseSchedule,
    batch_size: int,
    caption_dropout: float,
    generator: torch.Generator,
    with_labels: bool,
) -> BatchState:
    if len(data) < batch_size:
        raise ConfigError(f"dataset has {len(data)} samples, fewer than batch_size {batch_size}")
    idx = torch.randperm(len(data), generator=generator)[:batch_size]
    t = torch.randint(1, schedule.T + 1, (batch_size,), generator=generator)
    z0 = data.latents[idx]
    noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    drop = caption_dropout_mask(batch_size, caption_dropout, generator)
    return BatchState(
        z0=z0,
        t=t,
        noise=noise,
        token_ids=conditioner.tokenize([data.captions[i] for i in idx.tolist()]),
        drop_mask=drop,
        category_ids=data.category_ids[idx] if with_labels else None,
    )


def total_loss(
    stage: str,
    denoiser: Denoiser,
    conditioner: Conditioner,
    schedule: NoiseSchedule,
    state: BatchState,
    lambda_corr: float,
    lambda_cate: float,
    typicality: Optional[TypicalityStats] = None,
) -> LossTerms:
    """L_diff + λ_corr·L_corr (+ λ_cate·L_cate when fine-tuning), composed in float64.

    L_corr and L_cate use the same noised batch as L_diff; the visual features are
    the pooled clean-latent estimates of that batch.
    """
    if state.batch_size < 2:
        raise ValueError("total_loss needs a batch of at least 2 samples")
    finetune = stage == "finetune"
    if finetune and state.category_ids is None:
        raise ValueError("fine-tuning needs category labels")
    if finetune and typicality is None:
        raise ValueError("fine-tuning needs estimated typicality statistics")

    cond = conditioner(state.token_ids, state.category_ids if finetune else None)
    z_t = forward_sample(schedule, state.z0, state.t, state.noise)
    eps = denoise(denoiser, z_t, state.t, apply_dropout_mask(cond, state.drop_mask))
    l_diff = denoising_loss(eps, state.noise)

    mz = cosine_matrix(visual_features(z_t, state.t, eps, schedule))
    l_corr = corr_loss(mz, cosine_matrix(cond.pooled_text))
    if finetune:
        scores = support_score(cond.category_features, cond.pooled_text)
        weights = pair_weights(scores, typicality).to(mz.dtype)
        l_cate = cate_loss(mz, cosine_matrix(cond.category_features), weights)
    else:
        l_cate = torch.zeros((), dtype=l_diff.dtype)

    total = l_diff.double() + lambda_corr * l_corr.double()
    if finetune:
        total = total + lambda_cate * l_cate.double()
    return LossTerms(l_diff, l_corr, l_cate, lambda_corr, lambda_cate if finetune else 0.0, total)


def build_models(config: TrainConfig, categories: Sequence[str]) -> Tuple[Denoiser, Conditioner]:
    c = config.base_channels
    denoiser = build_denoiser(
        derive_seed(config.seed, INIT_STREAM, 0),
        latent_channels=LATENT_SHAPE[0],
        channels=(c, 2 * c),
        text_dim=config.text_dim,
    )
    conditioner = build_conditioner(
        derive_seed(config.seed, INIT_STREAM, 1),
        categories=categories,
        max_length=config.max_length,
        dim=config.text_dim,
    )
    return denoiser, conditioner


def restore_models(ckpt: Checkpoint) -> Tuple[Denoiser, Conditioner, TrainConfig]:
    config = TrainConfig.from_dict(ckpt.config)
    if config.architecture() != ckpt.architecture:
        raise ConfigError("checkpoint architecture does not match its config echo")
    denoiser, conditioner = build_models(config, ckpt.categories)
    apply_params(ckpt.params, denoiser, conditioner)
    return denoiser, conditioner, config


@torch.no_grad()
def estimate_typicality(
    conditioner: Conditioner, data: TrainingData, chunk: int = 256
) -> TypicalityStats:
    """Pre-pass over the corpus: support score of every caption for its own category."""
    acc = TypicalityAccumulator()
    for start in range(0, len(data), chunk):
        captions = data.captions[start : start + chunk]
        labels = data.category_ids[start : start + chunk]
        _, pooled = conditioner.encode_text(conditioner.tokenize(captions))
        acc.update(support_score(conditioner.category_features(labels), pooled))
    stats = acc.finalize()
    logger.info("Typicality stats: mu=%.6f sigma=%.6f over %d captions", stats.mu, stats.sigma, stats.sample_count)
    return stats


def _make_optimizer(config: TrainConfig, params) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate)
    return torch.optim.SGD(params, lr=config.learning_rate)


def train_stage(
    config: TrainConfig,
    data: TrainingData,
    denoiser: Denoiser,
    conditioner: Conditioner,
    stage: str,
    steps: Optional[int] = None,
    start_step: int = 0,
    typicality: Optional[TypicalityStats] = None,
    log_file: Optional[IO[str]] = None,
    optimizer_state: Optional[Dict[str, np.ndarray]] = None,
) -> Checkpoint:
    """Runs `steps` optimizer updates of one stage in place and returns the checkpoint.

    `optimizer_state` continues the moments of a previous run of the same stage.
    Raises NumericalError on the first non-finite loss.
    """
    if stage not in ("pretrain", "finetune"):
        raise ValueError(f"Invalid stage '{stage}'")
    steps = config.steps if steps is None else steps
    schedule = config.schedule()
    named = named_parameters(denoiser, conditioner)
    optimizer = _make_optimizer(config, list(named.values()))
    if optimizer_state:
        restored = apply_optimizer_state(optimizer_state, optimizer, named)
        logger.info("Restored optimizer state for %d parameters", restored)
    denoiser.train()
    conditioner.train()
    logger.info("Starting %s: steps %d..%d", stage, start_step + 1, start_step + steps)

    for step in range(start_step + 1, start_step + steps + 1):
        generator = torch_generator(config.seed, step)
        state = draw_batch(
            data, conditioner, schedule, config.batch_size, config.caption_dropout,
            generator, with_labels=stage == "finetune",
        )
        optimizer.zero_grad(set_to_none=True)
        terms = total_loss(
            stage, denoiser, conditioner, schedule, state,
            config.lambda_corr, config.lambda_cate, typicality,
        )
        record = terms.as_dict()
        if not terms.is_finite():
            logger.error("Aborting %s at step %d: %s", stage, step, record)
            raise NumericalError(step, record)
        terms.total.backward()
        if config.max_grad_norm > 0:
            torch.nn.utils.clip_grad_norm_(named.values(), config.max_grad_norm)
        optimizer.step()
        conditioner.clear_cache()
        if log_file is not None:
            log_file.write(json.dumps({"step": step, **record}) + "\n")
        if step % config.log_every == 0:
            logger.info(
                "step %d: l_diff=%.5f l_corr=%.5f l_cate=%.5f total=%.5f",
                step, record["l_diff"], record["l_corr"], record["l_cate"], record["total"],
            )

    return Checkpoint(
        params=collect_params(denoiser, conditioner),
        step=start_step + steps,
        stage=stage,
        config=config.to_dict(),
        architecture=config.architecture(),
        categories=list(conditioner.categories),
        typicality=typicality,
        optimizer=collect_optimizer_state(optimizer, named),
    )


def run_two_stage(
    pretrain: TrainConfig,
    finetune: TrainConfig,
    data: TrainingData,
    log_file: Optional[IO[str]] = None,
) -> Checkpoint:
    """Caption-only pretraining, typicality pre-pass, then category-guided fine-tuning."""
    if pretrain.architecture() != finetune.architecture():
        raise ConfigError("pretrain and finetune configs describe different architectures")
    denoiser, conditioner = build_models(pretrain, data.categories)
    first = train_stage(pretrain, data, denoiser, conditioner, "pretrain", log_file=log_file)
    stats = estimate_typicality(conditioner, data)
    return train_stage(
        finetune, data, denoiser, conditioner, "finetune",
        start_step=first.step, typicality=stats, log_file=log_file,
    )


def train(
    config: TrainConfig,
    data: TrainingData,
    resume: Optional[Checkpoint] = None,
    log_file: Optional[IO[str]] = None,
) -> Checkpoint:
    """Dispatches on `config.stage`; a resumed run continues the checkpoint's step counter."""
    if resume is None:
        if config.stage == "two_stage":
            finetune = TrainConfig.from_dict(config.to_dict(), stage="finetune", steps=config.finetune_steps)
            return run_two_stage(config, finetune, data, log_file)
        denoiser, conditioner = build_models(config, data.categories)
        start = 0
        typicality = None
        optimizer_state = None
    else:
        if config.architecture() != resume.architecture:
            raise ConfigError("resume checkpoint has a different architecture than the config")
        denoiser, conditioner, _ = restore_models(resume)
        start = resume.step
        typicality = resume.typicality
        if config.stage == "two_stage":
            raise ConfigError("resume a two-stage run with stage = finetune")
        same_run = resume.stage == config.stage and resume.config.get("optimizer") == config.optimizer
        optimizer_state = resume.optimizer if same_run else None
        if resume.optimizer and optimizer_state is None:
            logger.warning(
                "Resuming %s from a %s checkpoint: optimizer state starts fresh", config.stage, resume.stage
            )

    if config.stage == "finetune" and typicality is None:
        typicality = estimate_typicality(conditioner, data)
    return train_stage(
        config, data, denoiser, conditioner, config.stage,
        start_step=start, typicality=typicality, log_file=log_file, optimizer_state=optimizer_state,
    )


def sample_images(
    denoiser: Denoiser,
    conditioner: Conditioner,
    schedule: NoiseSchedule,
    prompts: Sequence[str],
    steps: int = 50,
    guidance: float = 7.5,
    seed: int = 0,
) -> List[np.ndarray]:
    """Decoded images for `prompts`, generated in chunks seeded by (seed, chunk)."""
    for prompt in sorted(set(prompts)):
        try:
            parse_caption(prompt)
        except ValueError:
            logger.warning("Prompt outside the caption grammar: %r", prompt)
    denoiser.eval()
    conditioner.eval()
    images: List[np.ndarray] = []
    for chunk, start in enumerate(range(0, len(prompts), SAMPLE_CHUNK)):
        with torch.no_grad():
            cond = conditioner.make_batch(list(prompts[start : start + SAMPLE_CHUNK]))
        latents = sample(
            denoiser, schedule, cond, steps=steps, guidance=guidance,
            seed=derive_seed(seed, chunk), latent_shape=LATENT_SHAPE,
        )
        images.extend(decode(latents))
    return images
