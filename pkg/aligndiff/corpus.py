"""
Procedural synthetic tissue corpus with invertible captions.

Every sample is rendered from a TissueSpec: a category (encoded visually by
nucleus hue), a nucleus count bucket and a nucleus radius bucket. The caption
is a fixed template over those buckets, so `parse_caption` recovers them and
`detect_nuclei` can check generated images against the prompt.

Usage:
    samples = generate_corpus(2000, n_categories=4, seed=7)
    write_dataset(samples, "data/train", master_seed=7, n_categories=4)
    samples = read_dataset("data/train")
"""

import json
import logging
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .codec import IMAGE_SIZE, load_png, quantize, save_png
from .errors import IntegrityError

logger = logging.getLogger("aligndiff")

DATASET_VERSION = 1

CATEGORY_NAMES: Tuple[str, ...] = (
    "carcinoma",
    "sarcoma",
    "lymphoma",
    "melanoma",
    "glioma",
    "mesothelioma",
    "blastoma",
    "seminoma",
)
COUNT_BUCKETS: Dict[str, Tuple[int, int]] = {"few": (3, 6), "many": (12, 20)}
RADIUS_BUCKETS: Dict[str, float] = {"small": 1.2, "large": 2.2}
GRAMMAR_WORDS: Tuple[str, ...] = ("a", "patch", "with", "few", "many", "small", "large", "nuclei")

# palette order keeps the first K hues of any K far apart
HUE_CENTERS: Tuple[float, ...] = tuple(0.5 + 0.0625 * k for k in (0, 4, 2, 6, 1, 5, 3, 7))
HUE_JITTER = 0.012
BACKGROUND_HSV = (0.92, 0.15, 0.92)
NUCLEUS_SATURATION = 0.75
NUCLEUS_VALUE = 0.55
TEXTURE_AMPLITUDE = 0.03

GRID_CELLS = 5
CELL_SIZE = IMAGE_SIZE / GRID_CELLS
CENTER_JITTER = 0.1

DARK_VALUE = 0.75
CORE_VALUE = 0.62
# blends of a nucleus with the background stay above 0.05 saturation while darker than DARK_VALUE
MIN_SATURATION = 0.04
# palette hues are 0.0625 apart, so the tolerance band around them is contiguous
HUE_TOLERANCE = 0.04
BACKGROUND_RGB = hsv_to_rgb(np.array(BACKGROUND_HSV))
BACKGROUND_TOLERANCE = 0.1
MIN_BACKGROUND_FRACTION = 0.3
MIN_AREA = 3
COUNT_SPLIT = 9
AREA_SPLIT = 11

_CAPTION_RE = re.compile(r"a ([a-z]+) patch with (few|many) (small|large) nuclei")


@dataclass(frozen=True)
class TissueSpec:
    """Ground-truth generator parameters behind one image+caption pair.

    Parameters
    ----------
        category : int
            index into CATEGORY_NAMES
        count_bucket : str
            'few' (3-6 nuclei) or 'many' (12-20 nuclei)
        nucleus_count : int
            number of nuclei drawn inside the count bucket
        radius_bucket : str
            'small' or 'large'
        stain_hue : int
            hue bucket; the legal bucket of category k is k
        background_texture_seed : int
            seed of the background texture field
    """

    category: int
    count_bucket: str
    nucleus_count: int
    radius_bucket: str
    stain_hue: int
    background_texture_seed: int

    def __post_init__(self):
        if not 0 <= self.category < len(CATEGORY_NAMES):
            raise ValueError(f"Unknown category: {self.category}")
        if self.count_bucket not in COUNT_BUCKETS:
            raise ValueError(f"Invalid count bucket: {self.count_bucket}")
        lo, hi = COUNT_BUCKETS[self.count_bucket]
        if not lo <= self.nucleus_count <= hi:
            raise ValueError(
                f"nucleus_count {self.nucleus_count} outside bucket {self.count_bucket} [{lo}, {hi}]"
            )
        if self.radius_bucket not in RADIUS_BUCKETS:
            raise ValueError(f"Invalid radius bucket: {self.radius_bucket}")
        if self.stain_hue != self.category:
            raise ValueError("stain_hue must be the legal hue bucket of the category")

    def buckets(self) -> "CaptionBuckets":
        return CaptionBuckets(self.category, self.count_bucket, self.radius_bucket)


class CaptionBuckets(NamedTuple):
    category: int
    count_bucket: str
    radius_bucket: str


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    id: int
    image: np.ndarray
    caption: str
    category_id: int
    spec: TissueSpec


def check_n_categories(n_categories: int) -> int:
    if not 2 <= n_categories <= len(CATEGORY_NAMES):
        raise ValueError(f"n_categories must lie in 2..{len(CATEGORY_NAMES)}, got {n_categories}")
    return int(n_categories)


def sample_spec(
    rng: np.random.Generator, category: int, n_categories: int = len(CATEGORY_NAMES)
) -> TissueSpec:
    """Uniform draw over the legal buckets of `category`."""
    if not 0 <= category < check_n_categories(n_categories):
        raise ValueError(f"Unknown category: {category}")
    count_bucket = ("few", "many")[int(rng.integers(2))]
    lo, hi = COUNT_BUCKETS[count_bucket]
    nucleus_count = int(rng.integers(lo, hi + 1))
    radius_bucket = ("small", "large")[int(rng.integers(2))]
    return TissueSpec(
        category=int(category),
        count_bucket=count_bucket,
        nucleus_count=nucleus_count,
        radius_bucket=radius_bucket,
        stain_hue=int(category),
        background_texture_seed=int(rng.integers(2**31 - 1)),
    )


def _background(seed: int, amplitude: float) -> np.ndarray:
    hsv = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    hsv[..., 0], hsv[..., 1], hsv[..., 2] = BACKGROUND_HSV
    if amplitude > 0:
        field = np.random.default_rng(seed).standard_normal((IMAGE_SIZE, IMAGE_SIZE))
        field = ndimage.gaussian_filter(field, sigma=1.5, mode="wrap")
        field /= np.abs(field).max()
        hsv[..., 2] += amplitude * field
    return hsv_to_rgb(hsv)


def render(
    spec: TissueSpec, rng: np.random.Generator, texture_amplitude: float = TEXTURE_AMPLITUDE
) -> np.ndarray:
    """Draws the TissueSpec's nuclei as anti-aliased disks over a textured background.

    Nuclei occupy distinct cells of a 5x5 grid, so disks never touch. The image
    is snapped to the 8-bit grid.
    """
    radius = RADIUS_BUCKETS[spec.radius_bucket]
    cells = rng.choice(GRID_CELLS * GRID_CELLS, size=spec.nucleus_count, replace=False)
    rows, cols = np.divmod(cells, GRID_CELLS)
    jitter = rng.uniform(-CENTER_JITTER, CENTER_JITTER, size=(spec.nucleus_count, 2))
    centers = np.stack([(rows + 0.5) * CELL_SIZE, (cols + 0.5) * CELL_SIZE], axis=1) + jitter
    hue = (HUE_CENTERS[spec.stain_hue] + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
    color = hsv_to_rgb(np.array([hue, NUCLEUS_SATURATION, NUCLEUS_VALUE]))

    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    coverage = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for cy, cx in centers:
        dist = np.hypot(yy - cy, xx - cx)
        coverage = np.maximum(coverage, np.clip(radius + 0.5 - dist, 0.0, 1.0))

    background = _background(spec.background_texture_seed, texture_amplitude)
    image = background * (1.0 - coverage[..., None]) + color * coverage[..., None]
    return quantize(image)


def format_caption(category: int, count_bucket: str, radius_bucket: str) -> str:
    """Caption for bucket values; category -1 renders as 'unknown'."""
    name = CATEGORY_NAMES[category] if 0 <= category < len(CATEGORY_NAMES) else "unknown"
    return f"a {name} patch with {count_bucket} {radius_bucket} nuclei"


def caption(spec: TissueSpec) -> str:
    return format_caption(spec.category, spec.count_bucket, spec.radius_bucket)


def parse_caption(text: str) -> CaptionBuckets:
    """Exact inverse of `caption` on the bucket fields.

    Raises ValueError for text outside the caption grammar.
    """
    normalized = " ".join(str(text).lower().split())
    match = _CAPTION_RE.fullmatch(normalized)
    if match is None:
        raise ValueError(f"Caption outside the grammar: {text!r}")
    name, count_bucket, radius_bucket = match.groups()
    if name not in CATEGORY_NAMES:
        raise ValueError(f"Unknown category name in caption: {name!r}")
    return CaptionBuckets(CATEGORY_NAMES.index(name), count_bucket, radius_bucket)


def _hue_gap(hues: np.ndarray, centers: Sequence[float]) -> np.ndarray:
    """Circular distance from each hue to the nearest of `centers`."""
    centers = np.asarray(centers, dtype=np.float64)
    return np.abs((np.asarray(hues)[..., None] - centers + 0.5) % 1.0 - 0.5).min(axis=-1)


def nucleus_mask(image: np.ndarray) -> np.ndarray:
    """Pixels whose color lies on the nucleus palette.

    A pixel qualifies when it is darker than the background (HSV value below
    DARK_VALUE), carries some stain (saturation at least MIN_SATURATION) and its
    hue lies within HUE_TOLERANCE of a palette hue. Gray, black and off-palette
    colors never qualify.
    """
    hsv = rgb_to_hsv(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0))
    return (
        (hsv[..., 2] < DARK_VALUE)
        & (hsv[..., 1] >= MIN_SATURATION)
        & (_hue_gap(hsv[..., 0], HUE_CENTERS) <= HUE_TOLERANCE)
    )


def nucleus_components(image: np.ndarray) -> np.ndarray:
    """Areas of the 4-connected palette components with at least MIN_AREA pixels."""
    labels, n = ndimage.label(nucleus_mask(image))
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    areas = np.bincount(labels.ravel())[1:]
    return areas[areas >= MIN_AREA]


def detect_nuclei(image: np.ndarray) -> int:
    return int(nucleus_components(image).size)


def background_fraction(image: np.ndarray) -> float:
    """Share of pixels within BACKGROUND_TOLERANCE (per channel) of the background color."""
    gap = np.abs(np.asarray(image, dtype=np.float64) - BACKGROUND_RGB).max(axis=-1)
    return float(np.mean(gap <= BACKGROUND_TOLERANCE))


def looks_like_tissue(image: np.ndarray) -> bool:
    """True when at least MIN_BACKGROUND_FRACTION of the image shows the stain background."""
    return background_fraction(image) >= MIN_BACKGROUND_FRACTION


def infer_buckets(image: np.ndarray, n_categories: int) -> Tuple[int, str, str]:
    """Recovers (category, count_bucket, radius_bucket) from pixels.

    Category is the nearest hue center (circular distance) to the circular mean
    hue of the nucleus cores; -1 when the image has no nucleus pixels.
    """
    areas = nucleus_components(image)
    count_bucket = "many" if areas.size >= COUNT_SPLIT else "few"
    radius_bucket = "large" if areas.size and np.median(areas) >= AREA_SPLIT else "small"

    pixels = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    mask = nucleus_mask(pixels)
    core = mask & (pixels.max(axis=-1) < CORE_VALUE)
    if not core.any():
        core = mask
    if not core.any():
        return -1, count_bucket, radius_bucket
    hues = rgb_to_hsv(pixels[core])[:, 0]
    angle = np.angle(np.mean(np.exp(2j * np.pi * hues))) / (2 * np.pi) % 1.0
    centers = np.asarray(HUE_CENTERS[:n_categories])
    gap = np.abs((centers - angle + 0.5) % 1.0 - 0.5)
    return int(np.argmin(gap)), count_bucket, radius_bucket


def generate_corpus(n: int, n_categories: int = 4, seed: int = 0) -> List[SyntheticSample]:
    """Generates `n` samples; categories cycle 0..K-1 so they stay balanced.

    Sample i draws from the i-th child of SeedSequence(seed), so any sample can be
    regenerated on its own and generation can be split across workers.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    check_n_categories(n_categories)
    samples = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        spec = sample_spec(rng, i % n_categories, n_categories)
        samples.append(
            SyntheticSample(
                id=i,
                image=render(spec, rng),
                caption=caption(spec),
                category_id=spec.category,
                spec=spec,
            )
        )
    logger.info("Generated %d samples over %d categories", n, n_categories)
    return samples


def _crc32(path: Path) -> str:
    return f"{zlib.crc32(path.read_bytes()) & 0xFFFFFFFF:08x}"


def _image_name(sample_id: int) -> str:
    return f"images/{sample_id:06d}.png"


def write_dataset(
    samples: Sequence[SyntheticSample],
    directory: Union[str, Path],
    master_seed: int,
    n_categories: int,
) -> Path:
    """Writes meta.json, captions.tsv and images/<id>.png with per-shard CRC32."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        save_png(s.image, root / _image_name(s.id))
        rows.append(
            {
                "id": s.id,
                "category_id": s.category_id,
                "caption": s.caption,
                "count_bucket": s.spec.count_bucket,
                "nucleus_count": s.spec.nucleus_count,
                "radius_bucket": s.spec.radius_bucket,
                "stain_hue": s.spec.stain_hue,
                "background_texture_seed": s.spec.background_texture_seed,
            }
        )
    pd.DataFrame(rows).to_csv(root / "captions.tsv", sep="\t", index=False, lineterminator="\n")

    shards = ["captions.tsv"] + [_image_name(s.id) for s in samples]
    meta = {
        "version": DATASET_VERSION,
        "count": len(samples),
        "categories": list(CATEGORY_NAMES[: check_n_categories(n_categories)]),
        "master_seed": int(master_seed),
        "crc32": {name: _crc32(root / name) for name in shards},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    logger.info("Wrote %d samples to %s", len(samples), root)
    return root


def read_meta(directory: Union[str, Path]) -> dict:
    path = Path(directory) / "meta.json"
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise IntegrityError(f"Malformed dataset manifest {path}: {e}") from e
    if meta.get("version") != DATASET_VERSION:
        raise IntegrityError(f"Unsupported dataset version: {meta.get('version')}")
    return meta


def read_dataset(directory: Union[str, Path]) -> List[SyntheticSample]:
    """Reads a dataset written by `write_dataset`, verifying every shard checksum."""
    root = Path(directory)
    meta = read_meta(root)

    present = sorted((root / "images").glob("*.png"))
    if len(present) != meta["count"]:
        raise IntegrityError(
            f"Manifest lists {meta['count']} samples but {len(present)} images are present"
        )
    for name, expected in meta["crc32"].items():
        path = root / name
        if not path.is_file():
            raise IntegrityError(f"Missing shard: {name}")
        if _crc32(path) != expected:
            raise IntegrityError(f"Checksum mismatch in shard {name}")

    table = pd.read_csv(root / "captions.tsv", sep="\t", keep_default_na=False, dtype={"caption": str})
    if len(table) != meta["count"]:
        raise IntegrityError(f"captions.tsv has {len(table)} rows, manifest says {meta['count']}")

    samples = []
    for row in table.itertuples(index=False):
        spec = TissueSpec(
            category=int(row.category_id),
            count_bucket=str(row.count_bucket),
            nucleus_count=int(row.nucleus_count),
            radius_bucket=str(row.radius_bucket),
            stain_hue=int(row.stain_hue),
            background_texture_seed=int(row.background_texture_seed),
        )
        samples.append(
            SyntheticSample(
                id=int(row.id),
                image=load_png(root / _image_name(int(row.id))),
                caption=str(row.caption),
                category_id=int(row.category_id),
                spec=spec,
            )
        )
    return samples


def write_prompt_samples(
    images: Sequence[np.ndarray], prompts: Sequence[str], directory: Union[str, Path]
) -> List[Path]:
    """Writes generated images as sample_<i>.png plus a prompts.tsv sidecar."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    files = []
    for i, image in enumerate(images):
        name = f"sample_{i:05d}.png"
        save_png(image, root / name)
        files.append(name)
    pd.DataFrame({"file": files, "prompt": list(prompts)}).to_csv(
        root / "prompts.tsv", sep="\t", index=False, lineterminator="\n"
    )
    return [root / f for f in files]


def load_pairs(directory: Union[str, Path]) -> Tuple[List[np.ndarray], List[str]]:
    """Images and their captions from either a dataset or a sample directory."""
    root = Path(directory)
    if (root / "meta.json").is_file():
        samples = read_dataset(root)
        return [s.image for s in samples], [s.caption for s in samples]
    sidecar = root / "prompts.tsv"
    if not sidecar.is_file():
        raise FileNotFoundError(f"{root} has neither meta.json nor prompts.tsv")
    table = pd.read_csv(sidecar, sep="\t", keep_default_na=False, dtype=str)
    return [load_png(root / f) for f in table["file"]], list(table["prompt"])
