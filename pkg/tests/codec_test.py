#!/usr/bin/env python3
import numpy as np
import pytest
import torch

from aligndiff.codec import LATENT_SHAPE, decode, encode, load_png, quantize, save_png


def random_image(seed=0):
    return np.random.default_rng(seed).random((32, 32, 3)).astype(np.float32)


@pytest.mark.fast
def test_latent_shape():
    z = encode(random_image())
    assert tuple(z.shape) == LATENT_SHAPE == (12, 16, 16)
    assert z.dtype == torch.float64


@pytest.mark.fast
def test_zero_image_maps_to_constant_grid():
    z = encode(np.zeros((32, 32, 3)))
    assert torch.equal(z, torch.full(LATENT_SHAPE, -1.0, dtype=torch.float64))


@pytest.mark.fast
def test_single_pixel_slot():
    x = np.zeros((32, 32, 3))
    c, row, col = 1, 7, 10
    x[row, col, c] = 1.0
    z = encode(x)
    channel = 4 * c + 2 * (row % 2) + col % 2
    assert z[channel, row // 2, col // 2].item() == 1.0
    assert int((z > -1.0).sum()) == 1


@pytest.mark.fast
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_round_trip_is_exact(seed):
    x = random_image(seed)
    assert np.max(np.abs(decode(encode(x)) - x)) == 0.0
    q = quantize(x)
    assert np.array_equal(decode(encode(q)), q)


@pytest.mark.fast
def test_float64_round_trip_keeps_dtype():
    x = random_image(3).astype(np.float64)
    out = decode(encode(x))
    assert out.dtype == np.float64
    assert np.max(np.abs(out - x)) == 0.0
    fine = np.random.default_rng(0).random((32, 32, 3))
    out = decode(encode(fine))
    assert out.dtype == np.float64
    assert np.max(np.abs(out - fine)) <= 2.0**-54
    assert decode(encode(fine).float()).dtype == np.float32


@pytest.mark.fast
def test_batch_round_trip():
    x = np.stack([random_image(s) for s in range(4)])
    z = encode(x)
    assert tuple(z.shape) == (4, *LATENT_SHAPE)
    assert np.array_equal(decode(z), x)


@pytest.mark.fast
def test_encode_of_decode_is_identity_on_pixel_latents():
    z = encode(quantize(random_image(5)))
    torch.testing.assert_close(encode(decode(z)), z, rtol=0, atol=0)


@pytest.mark.fast
def test_out_of_range_latents_are_clamped():
    z = torch.full(LATENT_SHAPE, 5.0)
    z[0, 0, 0] = float("nan")
    z[1] = -7.0
    x = decode(z)
    assert np.all(np.isfinite(x))
    assert x.min() >= 0.0 and x.max() <= 1.0


@pytest.mark.fast
def test_encode_is_affine():
    x, y = random_image(1).astype(np.float64), random_image(2).astype(np.float64)
    a = 0.3
    mixed = encode(a * x + (1 - a) * y)
    torch.testing.assert_close(mixed, a * encode(x) + (1 - a) * encode(y))


@pytest.mark.fast
def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        encode(np.zeros((16, 16, 3)))
    with pytest.raises(ValueError):
        encode(np.full((32, 32, 3), 1.5))
    with pytest.raises(ValueError):
        decode(torch.zeros(3, 32, 32))


@pytest.mark.fast
def test_png_round_trip(tmp_path):
    x = quantize(random_image(9))
    save_png(x, tmp_path / "x.png")
    assert np.array_equal(load_png(tmp_path / "x.png"), x)
