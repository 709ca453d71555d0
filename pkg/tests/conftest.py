#!/usr/bin/env python3
"""
    Fixture configs for tests
"""

import pytest

from aligndiff.AlignDiff import AlignDiff
from aligndiff.corpus import CATEGORY_NAMES, generate_corpus, write_dataset
from aligndiff.diffusion import build_schedule
from aligndiff.trainer import TrainConfig, TrainingData, build_models
from aligndiff.utils import make_corpus

N_SAMPLES = 24
N_CATEGORIES = 4
CORPUS_SEED = 7

TINY_MODEL = {"base_channels": 8, "text_dim": 16, "max_length": 12}
TINY_STAGE = {
    "batch_size": 4,
    "learning_rate": 1e-3,
    "num_timesteps": 50,
    "log_every": 5,
    "sample_steps": 5,
}


def tiny_config(stage="pretrain", steps=3, seed=0, **overrides):
    return TrainConfig(stage=stage, steps=steps, seed=seed, **{**TINY_MODEL, **TINY_STAGE, **overrides})


@pytest.fixture(scope="module")
def schedule():
    return build_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="module")
def small_schedule():
    return build_schedule(2, 0.1, 0.2)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(N_SAMPLES, n_categories=N_CATEGORIES, seed=CORPUS_SEED)


@pytest.fixture(scope="module")
def categories():
    return list(CATEGORY_NAMES[:N_CATEGORIES])


@pytest.fixture(scope="module")
def training_data(corpus, categories):
    return TrainingData.from_samples(corpus, categories)


@pytest.fixture(scope="module")
def make_config():
    """Factory for small, fast training configs"""
    return tiny_config


@pytest.fixture(scope="module")
def config():
    return tiny_config()


@pytest.fixture(scope="module")
def tiny_models(config, categories):
    return build_models(config, categories)


@pytest.fixture(scope="module")
def dataset_dir(corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    write_dataset(corpus, root, master_seed=CORPUS_SEED, n_categories=N_CATEGORIES)
    return root


@pytest.fixture(scope="module")
def fitted_model():
    model = AlignDiff(
        random_state=3,
        n_categories=N_CATEGORIES,
        train_params={
            "model": dict(TINY_MODEL),
            "pretrain": {"steps": 3, "batch_size": 4, "num_timesteps": 50},
            "finetune": {"steps": 2, "batch_size": 4, "num_timesteps": 50},
        },
        sampler_params={"steps": 3, "guidance": 2.0},
    )
    model.fit(make_corpus(16, n_categories=N_CATEGORIES, random_state=11))
    return model



@pytest.fixture(scope="module")
def end_to_end_corpus():
    return generate_corpus(2000, n_categories=N_CATEGORIES, seed=CORPUS_SEED)


@pytest.fixture(scope="module")
def held_out_corpus():
    return generate_corpus(256, n_categories=N_CATEGORIES, seed=CORPUS_SEED + 1)


@pytest.fixture(scope="module")
def trained_model(end_to_end_corpus):
    """Default two-stage schedule on the full synthetic corpus (several minutes on CPU)"""
    model = AlignDiff(random_state=0, n_categories=N_CATEGORIES)
    return model.fit(end_to_end_corpus)
