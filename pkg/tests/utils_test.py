#!/usr/bin/env python3
import os

import pytest
import torch

from aligndiff.corpus import SyntheticSample
from aligndiff.utils import (
    atomic_write_text,
    derive_seed,
    directory_checksum,
    make_corpus,
    seed_everything,
    torch_generator,
)


@pytest.mark.fast
def test_seed_everything():
    seed_everything(42)
    assert os.getenv("PYTHONHASHSEED") == "42"


@pytest.mark.fast
def test_derive_seed():
    assert derive_seed(3, 7) == derive_seed(3, 7)
    assert derive_seed(3, 7) != derive_seed(7, 3)
    assert derive_seed(3, 7) != derive_seed(3, 8)
    assert 0 <= derive_seed(2**32 - 1, 0) < 2**63


@pytest.mark.fast
def test_torch_generator():
    a = torch.randn(5, generator=torch_generator(1, 2))
    b = torch.randn(5, generator=torch_generator(1, 2))
    assert torch.equal(a, b)
    assert not torch.equal(a, torch.randn(5, generator=torch_generator(1, 3)))


@pytest.mark.fast
def test_directory_checksum_ignores_manifest(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "a.txt").write_text("alpha")
    before = directory_checksum(tmp_path)
    (tmp_path / "run_manifest.json").write_text("{}")
    assert directory_checksum(tmp_path) == before
    (tmp_path / "sub" / "a.txt").write_text("beta")
    assert directory_checksum(tmp_path) != before


@pytest.mark.fast
def test_directory_checksum_sees_renames(tmp_path):
    (tmp_path / "a.txt").write_text("x")
    before = directory_checksum(tmp_path)
    (tmp_path / "a.txt").rename(tmp_path / "b.txt")
    assert directory_checksum(tmp_path) != before


@pytest.mark.fast
def test_atomic_write_text(tmp_path):
    target = tmp_path / "nested" / "out.txt"
    atomic_write_text(target, "first\n")
    atomic_write_text(target, "second\n")
    assert target.read_text() == "second\n"
    assert [p.name for p in target.parent.iterdir()] == ["out.txt"]


@pytest.mark.fast
def test_make_corpus():
    samples = make_corpus(10, n_categories=3, random_state=5)
    assert len(samples) == 10
    assert all(isinstance(s, SyntheticSample) for s in samples)
    assert {s.category_id for s in samples} == {0, 1, 2}
    assert samples[0].image.shape == (32, 32, 3)
