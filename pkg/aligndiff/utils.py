"""
Utility functions for seeding, hashing and writing run artifacts
"""
import hashlib
import os
import random
import tempfile
from pathlib import Path
from typing import Iterable, List, Union

import numpy as np
import torch

PathLike = Union[str, Path]


def seed_everything(seed: int = 42) -> None:
    """
    Helper function to set the random seed for everything to get
    bit-identical reproduction of results
    """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    os.environ["PYTHONHASHSEED"] = str(seed)


def derive_seed(*keys: int) -> int:
    """Derives a 63-bit seed from a tuple of integers (seed, step, ...).

    The same keys always give the same seed, so a resumed run draws the same
    batches and noise as an uninterrupted one.
    """
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def torch_generator(*keys: int) -> torch.Generator:
    """CPU torch generator seeded from `derive_seed(*keys)`."""
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*keys))
    return gen


def make_corpus(n_samples: int = 1000, n_categories: int = 4, random_state: int = 42) -> List:
    """This will create a synthetic tissue corpus for demonstration purposes.

    Returns:
        list[SyntheticSample]: image, caption and ground-truth spec triples
    """
    from .corpus import generate_corpus  # pylint: disable=import-outside-toplevel

    return generate_corpus(n_samples, n_categories=n_categories, seed=random_state)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def directory_checksum(root: PathLike, exclude: Iterable[str] = ("run_manifest.json",)) -> str:
    """Checksum over relative paths and contents of every file below `root`.

    Files named in `exclude` are skipped (run manifests carry wall-clock times).
    """
    root = Path(root)
    skip = set(exclude)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path.name in skip:
            continue
        digest.update(path.relative_to(root).as_posix().encode("utf-8"))
        digest.update(b"\0")
        digest.update(sha256_file(path).encode("ascii"))
    return digest.hexdigest()


def atomic_write_text(path: PathLike, text: str) -> None:
    """Writes `text` to `path` through a temporary file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
