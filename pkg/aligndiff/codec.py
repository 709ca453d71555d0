"""
Functions for moving between image space and latent space.

The reference codec is lossless: space-to-depth with factor 2
(32x32x3 -> 12x16x16) followed by the fixed affine map z = (x - 0.5) * 2.
Arithmetic is done in float64 and encode always returns float64 latents, so
decode(encode(x)) == x bit for bit for every 8-bit or float32 image, and for
every float64 image whose values have float32 precision. Other float64 inputs
come back in float64 within 2**-54: the float64 values below 0.25 outnumber
those in [-1, -0.5), so no float64 latent with a shift can hold them all.
"""

from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_SIZE = 32
IMAGE_CHANNELS = 3
FACTOR = 2
LATENT_SHIFT = 0.5
LATENT_SCALE = 2.0
LATENT_SHAPE: Tuple[int, int, int] = (
    IMAGE_CHANNELS * FACTOR * FACTOR,
    IMAGE_SIZE // FACTOR,
    IMAGE_SIZE // FACTOR,
)


def check_image(x: np.ndarray) -> np.ndarray:
    """Validates an ImagePatch: float array [32, 32, 3] (or a batch of them) in [0, 1]."""
    x = np.asarray(x)
    if x.shape[-3:] != (IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS):
        raise ValueError(
            f"image must be {IMAGE_SIZE}x{IMAGE_SIZE}x{IMAGE_CHANNELS}, got {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return x


def encode(x: np.ndarray) -> torch.Tensor:
    """Maps image(s) [.., 32, 32, 3] to float64 latent(s) [.., 12, 16, 16].

    Pixel (c, 2i + a, 2j + b) lands in latent channel 4c + 2a + b at (i, j).
    """
    x = check_image(x)
    chw = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64)).movedim(-1, -3)
    squeeze = chw.ndim == 3
    if squeeze:
        chw = chw.unsqueeze(0)
    z = (F.pixel_unshuffle(chw, FACTOR) - LATENT_SHIFT) * LATENT_SCALE
    return z[0] if squeeze else z


def decode(z: torch.Tensor) -> np.ndarray:
    """Maps latent(s) [.., 12, 16, 16] back to image(s) clamped to [0, 1].

    float64 latents decode to float64 images, anything else to float32.
    """
    if tuple(z.shape[-3:]) != LATENT_SHAPE:
        raise ValueError(f"latent must have shape {LATENT_SHAPE}, got {tuple(z.shape)}")
    out_dtype = np.float64 if z.dtype == torch.float64 else np.float32
    z = z.detach().to(torch.float64)
    squeeze = z.ndim == 3
    if squeeze:
        z = z.unsqueeze(0)
    chw = F.pixel_shuffle(z / LATENT_SCALE + LATENT_SHIFT, FACTOR)
    # NaN maps to 0 rather than propagating into PNG bytes
    chw = torch.nan_to_num(chw, nan=0.0).clamp(0.0, 1.0)
    img = chw.movedim(-3, -1).numpy().astype(out_dtype)
    return img[0] if squeeze else img


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(x: np.ndarray) -> np.ndarray:
    """Snaps an image to the 8-bit grid so it survives a PNG round trip unchanged."""
    return (to_uint8(x).astype(np.float32) / np.float32(255.0)).astype(np.float32)


def save_png(x: np.ndarray, path: Union[str, Path]) -> None:
    """Writes an image as 8-bit RGB PNG, values mapped linearly from [0, 1]."""
    Image.fromarray(to_uint8(check_image(x)), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path: Union[str, Path]) -> np.ndarray:
    """Reads an 8-bit RGB PNG into a float32 image in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return check_image((arr.astype(np.float32) / np.float32(255.0)).astype(np.float32))
