#!/usr/bin/env python3
import numpy as np
import pandas as pd
import pytest

from aligndiff.AlignDiff import AlignDiff
from aligndiff.metrics import MetricReport
from aligndiff.utils import make_corpus

PROMPTS = ["a carcinoma patch with few small nuclei", "a lymphoma patch with many large nuclei"]


@pytest.mark.slow
def test_fit_sets_attributes(fitted_model):
    assert fitted_model.checkpoint_.step == 5
    assert fitted_model.checkpoint_.stage == "finetune"
    assert fitted_model.typicality_.sigma > 0
    assert fitted_model.config_.stage == "finetune"


@pytest.mark.slow
def test_fit_history(fitted_model):
    history = fitted_model.history_
    assert list(history.columns) == ["step", "l_diff", "l_corr", "l_cate", "total"]
    assert history["step"].tolist() == [1, 2, 3, 4, 5]
    assert (history["l_cate"].iloc[:3] == 0.0).all()


@pytest.mark.slow
def test_predict(fitted_model):
    images = fitted_model.predict(PROMPTS)
    assert len(images) == 2
    assert all(img.shape == (32, 32, 3) and img.dtype == np.float32 for img in images)
    again = fitted_model.predict(PROMPTS)
    assert all(np.array_equal(a, b) for a, b in zip(images, again))


@pytest.mark.fast
def test_predict_before_fit():
    with pytest.raises(ValueError):
        AlignDiff().predict(PROMPTS)


@pytest.mark.fast
def test_invalid_params():
    with pytest.raises(ValueError):
        AlignDiff(train_params={"warmup": {"steps": 1}})
    with pytest.raises(ValueError):
        AlignDiff(sampler_params={"eta": 0.0})
    with pytest.raises(ValueError):
        AlignDiff(provider="clip")
    with pytest.raises(ValueError):
        AlignDiff(random_state=-1)
    with pytest.raises(ValueError):
        AlignDiff(n_categories=9)


@pytest.mark.fast
def test_stage_config():
    model = AlignDiff(random_state=4, train_params={"model": {"text_dim": 16}, "finetune": {"lambda_cate": 0.5}})
    config = model.stage_config("finetune")
    assert config.seed == 4 and config.text_dim == 16 and config.lambda_cate == 0.5
    assert model.stage_config("pretrain", seed=9).seed == 9
    with pytest.raises(ValueError):
        model.stage_config("two_stage")


@pytest.mark.fast
def test_fit_requires_samples():
    with pytest.raises(TypeError):
        AlignDiff().fit([1, 2, 3])
    with pytest.raises(TypeError):
        AlignDiff().fit(pd.DataFrame({"a": [1]}))


@pytest.mark.slow
def test_checkpoint_round_trip(fitted_model, tmp_path):
    fitted_model.save(tmp_path / "ckpt")
    restored = AlignDiff.from_checkpoint(tmp_path / "ckpt")
    assert restored.n_categories == fitted_model.n_categories
    assert restored.typicality_ == fitted_model.typicality_
    a = fitted_model.predict(PROMPTS, seed=2)
    b = restored.predict(PROMPTS, seed=2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.slow
def test_evaluate(fitted_model):
    real = make_corpus(8, n_categories=4, random_state=21)
    prompts = [s.caption for s in real[:4]]
    report = fitted_model.evaluate(real, fitted_model.predict(prompts), prompts)
    assert isinstance(report, MetricReport)
    assert report.provider == "paramspace"
    assert report.get("fid", "synth_vs_real") >= 0.0
    assert 0.0 <= report.get("accuracy", "synth") <= 1.0


@pytest.mark.fast
def test_category_prompts():
    prompts = AlignDiff(n_categories=2).category_prompts(4)
    assert prompts == [
        "a carcinoma patch with few small nuclei",
        "a carcinoma patch with few large nuclei",
        "a carcinoma patch with many small nuclei",
        "a carcinoma patch with many large nuclei",
        "a sarcoma patch with few small nuclei",
        "a sarcoma patch with few large nuclei",
        "a sarcoma patch with many small nuclei",
        "a sarcoma patch with many large nuclei",
    ]


@pytest.mark.slow
def test_category_ablation():
    model = AlignDiff(
        random_state=0,
        n_categories=2,
        train_params={
            "model": {"base_channels": 8, "text_dim": 16, "max_length": 12},
            "pretrain": {"steps": 2, "batch_size": 4, "num_timesteps": 50},
            "finetune": {"steps": 2, "batch_size": 4, "num_timesteps": 50},
        },
        sampler_params={"steps": 2, "guidance": 2.0},
    )
    table = model.category_ablation(make_corpus(8, n_categories=2, random_state=1), seeds=[0], n_per_category=3)
    assert list(table.columns) == ["seed", "lambda_cate", "silhouette"]
    assert table["lambda_cate"].tolist() == [0.1, 0.0]
    assert table["silhouette"].between(-1.0, 1.0).all()
