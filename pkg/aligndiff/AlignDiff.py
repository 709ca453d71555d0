"""
This file contains the implementation of AlignDiff.

AlignDiff wraps the two-stage text-to-image diffusion pipeline behind an
estimator interface: caption-only pretraining with the semantic-consistency
loss, then fine-tuning with typicality-weighted category guidance.

Usage:
    # Create an AlignDiff object
    model = AlignDiff(
        random_state=7,
        train_params={"pretrain": {"steps": 2000}, "finetune": {"steps": 2000}},
    )

    # Fit it to a synthetic corpus
    model.fit(make_corpus(2000))

    # Generate images from prompts
    images = model.predict(["a carcinoma patch with many large nuclei"] * 4)
"""

import copy
import io
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpus import (
    CATEGORY_NAMES,
    COUNT_BUCKETS,
    RADIUS_BUCKETS,
    SyntheticSample,
    check_n_categories,
    format_caption,
)
from .embeddings import VALID_PROVIDERS, PixelStatProvider, get_provider
from .metrics import MetricReport, evaluate_sets, silhouette
from .trainer import (
    TrainConfig,
    TrainingData,
    build_models,
    estimate_typicality,
    restore_models,
    sample_images,
    train_stage,
)
from .utils import seed_everything

logger = logging.getLogger("aligndiff")
logger.setLevel(logging.ERROR)
sh = logging.StreamHandler()
sh.setFormatter(
    logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"),
)
logger.addHandler(sh)


class AlignDiff(BaseEstimator):
    """AlignDiff

    Trains a text-conditioned latent diffusion model whose visual similarity
    structure is aligned with caption and category similarity.

    Parameters
    ----------
            random_state : int, default=42
                Seed of every random draw: initialisation, batches, noise and sampling.

            n_categories : int, default=4
                Number of categories of the corpus (2 to 8).

            verbose : bool, default=False
                Level of verbosity to print when fitting and predicting.
                Setting to False will only show errors.

            train_params : dict, optional
                A dictionary containing dictionaries 'model', 'pretrain' and 'finetune'.
                'model' holds the architecture keys shared by both stages, the stage
                dictionaries hold the per-stage TrainConfig keys.

                Example:
                train_params = {
                                'model': {'base_channels': 32},
                                'pretrain': {'steps': 2000, 'lambda_corr': 0.1},
                                'finetune': {'steps': 2000, 'lambda_cate': 0.1}
                            }

            sampler_params : dict, optional
                Parameters of the guided sampler: 'steps' and 'guidance'.

            provider : str, default=paramspace
                Embedding provider used by `evaluate`: 'pixelstat' or 'paramspace'.
    """

    def __init__(
        self,
        random_state: int = 42,
        n_categories: int = 4,
        verbose: bool = False,
        train_params: dict = None,  # type: ignore # noqa
        sampler_params: dict = None,  # type: ignore # noqa
        provider: str = "paramspace",
    ):
        self.random_state = random_state
        seed_everything(self.random_state)
        self.n_categories = check_n_categories(n_categories)
        self.provider = provider

        default_train_params = {
            "model": {"base_channels": 32, "text_dim": 64, "max_length": 24},
            "pretrain": {
                "steps": 2000,
                "batch_size": 32,
                "learning_rate": 1e-3,
                "lambda_corr": 0.1,
                "caption_dropout": 0.1,
                "optimizer": "adam",
                "max_grad_norm": 1.0,
            },
            "finetune": {
                "steps": 2000,
                "batch_size": 32,
                "learning_rate": 1e-3,
                "lambda_corr": 0.1,
                "lambda_cate": 0.1,
                "caption_dropout": 0.1,
                "optimizer": "adam",
                "max_grad_norm": 1.0,
            },
        }
        default_sampler_params = {"steps": 50, "guidance": 7.5}

        if train_params:
            for key in train_params:
                if key in default_train_params:
                    default_train_params[key].update(train_params[key])  # type: ignore # noqa
                else:
                    raise ValueError(f"Invalid key '{key}' in train_params")
        self.train_params = default_train_params

        if sampler_params:
            for key in sampler_params:
                if key not in default_sampler_params:
                    raise ValueError(f"Invalid key '{key}' in sampler_params")
            default_sampler_params.update(sampler_params)
        self.sampler_params = default_sampler_params

        if verbose:  # pragma: no cover
            logger.setLevel(logging.DEBUG)
            self.verbose = True
        else:  # pragma: no cover
            logger.setLevel(logging.ERROR)
            self.verbose = False

    def __repr__(self):  # pragma: no cover
        return f"""AlignDiff(random_state={self.random_state}
                            ,n_categories={self.n_categories}
                            ,verbose={self.verbose}
                            ,provider={self.provider}
                            ,train_params={self.train_params}
                            ,sampler_params={self.sampler_params}
                            )"""

    @property
    def provider(self):
        """Getter for provider"""
        return self._provider

    @provider.setter
    def provider(self, value):
        """Setter for provider"""
        if value not in VALID_PROVIDERS:
            raise ValueError(f"Invalid provider: {value}")
        self._provider = value

    @property
    def random_state(self):
        """Getter for random state"""
        return self._random_state

    @random_state.setter
    def random_state(self, value):
        """Setter for random state"""
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise ValueError("random_state must be a non-negative integer")
        self._random_state = value

    def stage_config(self, stage: str, seed: Optional[int] = None, **overrides) -> TrainConfig:
        """TrainConfig for 'pretrain' or 'finetune' built from train_params."""
        if stage not in ("pretrain", "finetune"):
            raise ValueError(f"Invalid stage: {stage}")
        params = {**self.train_params["model"], **self.train_params[stage], **overrides}
        seed = self.random_state if seed is None else seed
        return TrainConfig.from_dict(
            params,
            stage=stage,
            seed=seed,
            guidance_scale=self.sampler_params["guidance"],
            sample_steps=self.sampler_params["steps"],
        )

    def _training_data(self, samples: Sequence[SyntheticSample]) -> TrainingData:
        if not isinstance(samples, (list, tuple)) or not all(
            isinstance(s, SyntheticSample) for s in samples
        ):
            raise TypeError("Requires a sequence of SyntheticSample as input")
        return TrainingData.from_samples(samples, CATEGORY_NAMES[: self.n_categories])

    def fit(self, samples: Sequence[SyntheticSample], seed: Optional[int] = None, **finetune_overrides) -> "AlignDiff":
        """Runs pretraining, the typicality pre-pass and fine-tuning.

        Parameters
        ----------
            samples : list of SyntheticSample
                training corpus
            seed : int, optional
                overrides random_state for this fit

        Returns
        -------
            self
        """
        data = self._training_data(samples)
        pretrain = self.stage_config("pretrain", seed)
        finetune = self.stage_config("finetune", seed, **finetune_overrides)

        log = io.StringIO()
        logger.info("Pretraining for %d steps", pretrain.steps)
        denoiser, conditioner = build_models(pretrain, data.categories)
        first = train_stage(pretrain, data, denoiser, conditioner, "pretrain", log_file=log)
        self._finish_fit(finetune, data, denoiser, conditioner, first.step, log)
        return self

    def _finish_fit(self, finetune, data, denoiser, conditioner, start_step, log) -> None:
        try:
            stats = estimate_typicality(conditioner, data)
        except ValueError as e:
            logger.error("Failed to estimate typicality statistics: %s", str(e))
            raise
        logger.info("Fine-tuning for %d steps", finetune.steps)
        self.checkpoint_ = train_stage(
            finetune, data, denoiser, conditioner, "finetune",
            start_step=start_step, typicality=stats, log_file=log,
        )
        self.denoiser_ = denoiser
        self.conditioner_ = conditioner
        self.config_ = finetune
        self.typicality_ = stats
        self.history_ = pd.read_json(io.StringIO(log.getvalue()), lines=True) if log.getvalue() else pd.DataFrame()

    def save(self, path: Union[str, Path]) -> Path:
        return save_checkpoint(self.checkpoint_, path)

    @classmethod
    def from_checkpoint(cls, ckpt: Union[str, Path, Checkpoint], **kwargs) -> "AlignDiff":
        """Estimator restored from a checkpoint directory or object."""
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        denoiser, conditioner, config = restore_models(ckpt)
        model = cls(
            random_state=config.seed,
            n_categories=len(ckpt.categories),
            sampler_params={"steps": config.sample_steps, "guidance": config.guidance_scale},
            **kwargs,
        )
        model.checkpoint_ = ckpt
        model.denoiser_ = denoiser
        model.conditioner_ = conditioner
        model.config_ = config
        model.typicality_ = ckpt.typicality
        return model

    def predict(self, prompts: Sequence[str], seed: Optional[int] = None) -> List[np.ndarray]:
        """Generates one image per prompt.

        Parameters
        ----------
        prompts : list of str
            captions in the corpus grammar (others are accepted with a warning)
        seed : int, optional
            sampling seed, defaults to random_state

        Returns
        -------
        images : list of np.ndarray
            float32 images [32, 32, 3] in [0, 1]
        """
        if not hasattr(self, "denoiser_"):
            raise ValueError("AlignDiff must be fitted before predict")
        return sample_images(
            self.denoiser_,
            self.conditioner_,
            self.config_.schedule(),
            list(prompts),
            steps=self.sampler_params["steps"],
            guidance=self.sampler_params["guidance"],
            seed=self.random_state if seed is None else seed,
        )

    def evaluate(
        self,
        real: Sequence[SyntheticSample],
        images: Sequence[np.ndarray],
        prompts: Sequence[str],
    ) -> MetricReport:
        """Compares generated images (and their prompts) with a real held-out corpus.

        Returns
        -------
        report : MetricReport
            rows of (metric, dataset, value)
        """
        return evaluate_sets(
            [s.image for s in real],
            [s.caption for s in real],
            images,
            prompts,
            provider=get_provider(self.provider, self.n_categories),
            n_categories=self.n_categories,
            seed=self.random_state,
        )

    def category_prompts(self, n_per_category: int) -> List[str]:
        """n prompts per category, cycling through the count and radius buckets."""
        combos = [(c, r) for c in COUNT_BUCKETS for r in RADIUS_BUCKETS]
        return [
            format_caption(k, *combos[i % len(combos)])
            for k in range(self.n_categories)
            for i in range(n_per_category)
        ]

    def category_ablation(
        self,
        samples: Sequence[SyntheticSample],
        seeds: Sequence[int] = (0, 1, 2),
        n_per_category: int = 16,
        lambda_cate: Optional[float] = None,
    ) -> pd.DataFrame:
        """Silhouette of generated category clusters with and without category guidance.

        Each seed pretrains once; two copies are then fine-tuned, one with
        lambda_cate and one with lambda_cate = 0. Embeddings are pixel statistics.

        Returns
        -------
        pd.DataFrame
            columns seed, lambda_cate, silhouette
        """
        data = self._training_data(samples)
        lam = self.train_params["finetune"]["lambda_cate"] if lambda_cate is None else lambda_cate
        prompts = self.category_prompts(n_per_category)
        labels = np.repeat(np.arange(self.n_categories), n_per_category)
        embedder = PixelStatProvider()
        rows = []
        for seed in seeds:
            pretrain = self.stage_config("pretrain", seed)
            denoiser, conditioner = build_models(pretrain, data.categories)
            first = train_stage(pretrain, data, denoiser, conditioner, "pretrain")
            for weight in (lam, 0.0):
                finetune = self.stage_config("finetune", seed, lambda_cate=weight)
                d, c = copy.deepcopy(denoiser), copy.deepcopy(conditioner)
                self._finish_fit(finetune, data, d, c, first.step, io.StringIO())
                images = self.predict(prompts, seed=seed)
                score = silhouette(embedder.embed_images(images), labels)
                logger.info("seed %d lambda_cate %.3f silhouette %.4f", seed, weight, score)
                rows.append({"seed": int(seed), "lambda_cate": float(weight), "silhouette": score})
        return pd.DataFrame(rows, columns=["seed", "lambda_cate", "silhouette"])
