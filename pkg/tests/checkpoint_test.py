#!/usr/bin/env python3
import dataclasses
import json
import shutil

import numpy as np
import pytest
import torch

from aligndiff.alignment import TypicalityStats
from aligndiff.checkpoint import (
    BLOB_NAME,
    MANIFEST_NAME,
    Checkpoint,
    apply_optimizer_state,
    apply_params,
    collect_optimizer_state,
    collect_params,
    load_checkpoint,
    named_parameters,
    save_checkpoint,
)
from aligndiff.errors import IntegrityError
from aligndiff.trainer import build_models, restore_models


@pytest.fixture(scope="module")
def checkpoint(config, categories):
    denoiser, conditioner = build_models(config, categories)
    return Checkpoint(
        params=collect_params(denoiser, conditioner),
        step=7,
        stage="finetune",
        config=config.to_dict(),
        architecture=config.architecture(),
        categories=categories,
        typicality=TypicalityStats(mu=0.8, sigma=0.1, sample_count=24),
    )


@pytest.fixture(scope="module")
def saved(checkpoint, tmp_path_factory):
    return save_checkpoint(checkpoint, tmp_path_factory.mktemp("ckpt"))


def corrupted_copy(saved, tmp_path):
    return shutil.copytree(saved, tmp_path / "copy")


@pytest.mark.fast
def test_round_trip_is_bit_identical(checkpoint, saved):
    loaded = load_checkpoint(saved)
    assert loaded.step == 7 and loaded.stage == "finetune"
    assert loaded.config == checkpoint.config
    assert loaded.architecture == checkpoint.architecture
    assert loaded.categories == checkpoint.categories
    assert loaded.typicality == checkpoint.typicality
    assert list(loaded.params) == list(checkpoint.params)
    for name, arr in checkpoint.params.items():
        assert loaded.params[name].dtype == np.float32
        assert np.array_equal(loaded.params[name], arr)


@pytest.mark.fast
def test_restored_models_produce_the_same_params(checkpoint, saved):
    denoiser, conditioner, config = restore_models(load_checkpoint(saved))
    assert config.to_dict() == checkpoint.config
    restored = collect_params(denoiser, conditioner)
    assert all(np.array_equal(restored[k], v) for k, v in checkpoint.params.items())


@pytest.mark.fast
def test_flipped_byte_is_detected(saved, tmp_path):
    copy = corrupted_copy(saved, tmp_path)
    blob = bytearray((copy / BLOB_NAME).read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    (copy / BLOB_NAME).write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_checkpoint(copy)


@pytest.mark.fast
def test_unknown_version_is_rejected(saved, tmp_path):
    copy = corrupted_copy(saved, tmp_path)
    manifest = json.loads((copy / MANIFEST_NAME).read_text())
    manifest["version"] = 2
    (copy / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError, match="version"):
        load_checkpoint(copy)


@pytest.mark.fast
def test_missing_blob_is_rejected(saved, tmp_path):
    copy = corrupted_copy(saved, tmp_path)
    (copy / BLOB_NAME).unlink()
    with pytest.raises(IntegrityError):
        load_checkpoint(copy)
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "nowhere")


@pytest.mark.fast
def test_array_outside_blob_is_rejected(saved, tmp_path):
    copy = corrupted_copy(saved, tmp_path)
    manifest = json.loads((copy / MANIFEST_NAME).read_text())
    manifest["arrays"][0]["offset"] = (copy / BLOB_NAME).stat().st_size
    (copy / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError, match="outside"):
        load_checkpoint(copy)


@pytest.mark.fast
def test_missing_array_is_rejected(checkpoint, config, categories):
    params = dict(checkpoint.params)
    params.pop(next(iter(params)))
    denoiser, conditioner = build_models(config, categories)
    with pytest.raises(IntegrityError, match="missing"):
        apply_params(params, denoiser, conditioner)


@pytest.mark.fast
def test_shape_mismatch_is_rejected(checkpoint, config, categories):
    params = dict(checkpoint.params)
    name = next(iter(params))
    params[name] = np.zeros(params[name].size + 1, dtype=np.float32)
    denoiser, conditioner = build_models(config, categories)
    with pytest.raises(IntegrityError, match="shape"):
        apply_params(params, denoiser, conditioner)


@pytest.mark.fast
def test_optimizer_state_round_trip(config, categories, tmp_path):
    denoiser, conditioner = build_models(config, categories)
    named = named_parameters(denoiser, conditioner)
    optimizer = torch.optim.Adam(list(named.values()), lr=1e-3)
    sum(p.float().pow(2).sum() for p in named.values()).backward()
    optimizer.step()
    state = collect_optimizer_state(optimizer, named)
    assert len(state) == 3 * len(named)

    ckpt = Checkpoint(
        params=collect_params(denoiser, conditioner),
        step=1,
        stage="pretrain",
        config=config.to_dict(),
        architecture=config.architecture(),
        categories=categories,
        optimizer=state,
    )
    loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "adam"))
    assert list(loaded.params) == list(ckpt.params)
    assert loaded.optimizer.keys() == state.keys()
    assert all(np.array_equal(loaded.optimizer[k], v) for k, v in state.items())

    fresh = torch.optim.Adam(list(named.values()), lr=1e-3)
    assert apply_optimizer_state(loaded.optimizer, fresh, named) == len(named)
    for param in named.values():
        for key in ("exp_avg", "exp_avg_sq", "step"):
            assert torch.equal(fresh.state[param][key], optimizer.state[param][key])
    with pytest.raises(IntegrityError):
        apply_optimizer_state({"denoiser.missing.exp_avg": np.zeros(1, np.float32)}, fresh, named)
    assert load_checkpoint(save_checkpoint(dataclasses.replace(ckpt, optimizer={}), tmp_path / "sgd")).optimizer == {}
