#!/usr/bin/env python3
import numpy as np
import pytest

from aligndiff.corpus import infer_buckets
from aligndiff.embeddings import (
    VALID_PROVIDERS,
    ParamSpaceProvider,
    PixelStatProvider,
    get_provider,
    luminance,
)
from aligndiff.metrics import plip_t


@pytest.mark.fast
def test_luminance_of_gray_is_identity():
    gray = np.full((32, 32, 3), 0.4)
    np.testing.assert_allclose(luminance(gray), 0.4)


@pytest.mark.fast
def test_pixelstat_embedding(corpus):
    provider = PixelStatProvider()
    assert provider.dim == 112
    emb = provider.embed_image(corpus[0].image)
    assert emb.shape == (112,)
    np.testing.assert_allclose(emb[64:].reshape(3, 16).sum(axis=1), 1.0)
    assert np.array_equal(emb, provider.embed_image(corpus[0].image))
    assert provider.embed_images([s.image for s in corpus[:5]]).shape == (5, 112)


@pytest.mark.fast
def test_pixelstat_has_no_text():
    with pytest.raises(ValueError):
        PixelStatProvider().embed_text("a carcinoma patch with few small nuclei")


@pytest.mark.fast
def test_paramspace_bucket_vector():
    provider = ParamSpaceProvider(4)
    assert provider.dim == 9
    vec = provider.bucket_vector(2, "many", "small")
    assert np.linalg.norm(vec) == pytest.approx(1.0)
    assert np.count_nonzero(vec) == 3
    unknown = provider.bucket_vector(-1, "few", "large")
    assert np.count_nonzero(unknown[:4]) == 0
    assert np.linalg.norm(unknown) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        provider.bucket_vector(4, "few", "large")


@pytest.mark.fast
def test_paramspace_image_matches_own_caption(corpus):
    provider = ParamSpaceProvider(4)
    agreeing = [s for s in corpus if infer_buckets(s.image, 4) == tuple(s.spec.buckets())]
    assert agreeing
    for s in agreeing:
        assert plip_t(provider.embed_text(s.caption), provider.embed_image(s.image)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.fast
def test_get_provider():
    assert set(VALID_PROVIDERS) == {"pixelstat", "paramspace"}
    assert get_provider("paramspace", 6).dim == 6 + 5
    assert isinstance(get_provider("pixelstat"), PixelStatProvider)
    with pytest.raises(ValueError):
        get_provider("clip")


@pytest.mark.fast
def test_paramspace_off_palette_images_match_no_caption(corpus):
    provider = ParamSpaceProvider(4)
    noise = np.random.default_rng(0).random((32, 32, 3))
    captions = sorted({s.caption for s in corpus})
    for image in (noise, np.zeros((32, 32, 3)), np.full((32, 32, 3), 0.3)):
        emb = provider.embed_image(image)
        assert np.array_equal(emb, provider.off_palette_vector())
        assert all(plip_t(provider.embed_text(c), emb) == 0.0 for c in captions)
    assert all(provider.embed_image(s.image)[-1] == 0.0 for s in corpus)
