"""
Checkpoint directory format.

    <dir>/params.bin      every parameter array as little-endian float32, concatenated,
                          followed by the optimizer buffers (keys starting "optim.")
    <dir>/manifest.json   version, stage, step, config echo, architecture, categories,
                          typicality statistics, array directory and blob checksum

Loading validates the version, the blob checksum and every array checksum.
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch
from torch import nn

from .alignment import TypicalityStats
from .errors import IntegrityError
from .utils import atomic_write_text, sha256_bytes

logger = logging.getLogger("aligndiff")

CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
PARAM_DTYPE = np.dtype("<f4")
PREFIXES = {"denoiser": "denoiser.", "text": "text."}
OPTIMIZER_PREFIX = "optim."


@dataclass(eq=False)
class Checkpoint:
    params: Dict[str, np.ndarray]
    step: int
    stage: str
    config: dict
    architecture: dict
    categories: List[str]
    typicality: Optional[TypicalityStats] = None
    extra: dict = field(default_factory=dict)
    # optimizer buffers keyed "<param name>.<buffer>"; empty for plain SGD
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)


def collect_params(denoiser: nn.Module, conditioner: nn.Module) -> Dict[str, np.ndarray]:
    """Snapshot of both modules' state as float32 arrays, keyed with module prefixes."""
    params: Dict[str, np.ndarray] = {}
    for prefix, module in ((PREFIXES["denoiser"], denoiser), (PREFIXES["text"], conditioner)):
        for name, tensor in module.state_dict().items():
            params[prefix + name] = tensor.detach().cpu().numpy().astype(PARAM_DTYPE, copy=True)
    return params


def apply_params(params: Dict[str, np.ndarray], denoiser: nn.Module, conditioner: nn.Module) -> None:
    """Loads arrays into the modules; every module array must be present exactly once."""
    for prefix, module in ((PREFIXES["denoiser"], denoiser), (PREFIXES["text"], conditioner)):
        own = module.state_dict()
        subset = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
        missing = sorted(set(own) - set(subset))
        unexpected = sorted(set(subset) - set(own))
        if missing or unexpected:
            raise IntegrityError(f"parameter mismatch: missing {missing}, unexpected {unexpected}")
        state = {}
        for name, ref in own.items():
            arr = subset[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise IntegrityError(
                    f"shape mismatch for {prefix}{name}: {arr.shape} vs {tuple(ref.shape)}"
                )
            state[name] = torch.from_numpy(np.array(arr, dtype=PARAM_DTYPE)).to(ref.dtype)
        module.load_state_dict(state, strict=True)


def named_parameters(denoiser: nn.Module, conditioner: nn.Module) -> Dict[str, nn.Parameter]:
    """Trainable parameters under their checkpoint names, in optimizer order."""
    named: Dict[str, nn.Parameter] = {}
    for prefix, module in ((PREFIXES["denoiser"], denoiser), (PREFIXES["text"], conditioner)):
        for name, param in module.named_parameters():
            named[prefix + name] = param
    return named


def collect_optimizer_state(
    optimizer: torch.optim.Optimizer, named: Dict[str, nn.Parameter]
) -> Dict[str, np.ndarray]:
    """Per-parameter optimizer buffers (Adam moments and step count) as float32 arrays.

    Keys are parameter name + '.' + buffer name; parameters the optimizer has not
    touched yet contribute nothing.
    """
    arrays: Dict[str, np.ndarray] = {}
    for name, param in named.items():
        for key, value in sorted(optimizer.state.get(param, {}).items()):
            tensor = torch.as_tensor(value).detach().cpu()
            arrays[f"{name}.{key}"] = tensor.numpy().astype(PARAM_DTYPE, copy=True)
    return arrays


def apply_optimizer_state(
    state: Dict[str, np.ndarray], optimizer: torch.optim.Optimizer, named: Dict[str, nn.Parameter]
) -> int:
    """Restores buffers from `collect_optimizer_state`; returns how many parameters got state."""
    buffers: Dict[str, Dict[str, np.ndarray]] = {}
    for key, arr in state.items():
        name, _, buffer = key.rpartition(".")
        if name not in named:
            raise IntegrityError(f"optimizer state for unknown parameter {name}")
        buffers.setdefault(name, {})[buffer] = arr
    for name, arrays in buffers.items():
        param = named[name]
        restored = {}
        for buffer, arr in arrays.items():
            if buffer == "step":
                restored[buffer] = torch.tensor(float(arr))
                continue
            if tuple(arr.shape) != tuple(param.shape):
                raise IntegrityError(f"optimizer state shape mismatch for {name}.{buffer}")
            restored[buffer] = torch.from_numpy(np.array(arr, dtype=PARAM_DTYPE)).to(param.dtype)
        optimizer.state[param] = restored
    return len(buffers)


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, directory: Union[str, Path]) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    chunks, arrays, offset = [], [], 0
    entries = [*ckpt.params.items()]
    entries += [(OPTIMIZER_PREFIX + k, v) for k, v in ckpt.optimizer.items()]
    for name, arr in entries:
        data = np.ascontiguousarray(arr, dtype=PARAM_DTYPE).tobytes()
        arrays.append(
            {"name": name, "offset": offset, "shape": list(arr.shape), "sha256": sha256_bytes(data)}
        )
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "config": ckpt.config,
        "architecture": ckpt.architecture,
        "categories": list(ckpt.categories),
        "typicality": None if ckpt.typicality is None else ckpt.typicality.to_dict(),
        "extra": ckpt.extra,
        "arrays": arrays,
        "blob_sha256": sha256_bytes(blob),
    }
    _atomic_write_bytes(root / BLOB_NAME, blob)
    atomic_write_text(root / MANIFEST_NAME, json.dumps(manifest, indent=2) + "\n")
    logger.info("Saved checkpoint at step %d to %s", ckpt.step, root)
    return root


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    root = Path(directory)
    try:
        manifest = json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))
        blob = (root / BLOB_NAME).read_bytes()
    except FileNotFoundError as e:
        raise IntegrityError(f"incomplete checkpoint {root}: {e}") from e
    except json.JSONDecodeError as e:
        raise IntegrityError(f"unreadable checkpoint manifest: {e}") from e

    if manifest.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"unknown checkpoint version {manifest.get('version')!r}")
    if sha256_bytes(blob) != manifest.get("blob_sha256"):
        raise IntegrityError("checkpoint blob checksum mismatch")

    params: Dict[str, np.ndarray] = {}
    optimizer: Dict[str, np.ndarray] = {}
    seen = set()
    for entry in manifest.get("arrays", []):
        name = entry["name"]
        if name in seen:
            raise IntegrityError(f"array {name} listed twice")
        seen.add(name)
        shape = tuple(int(s) for s in entry["shape"])
        start = int(entry["offset"])
        end = start + int(np.prod(shape, dtype=np.int64)) * PARAM_DTYPE.itemsize
        if start < 0 or end > len(blob):
            raise IntegrityError(f"array {name} lies outside the blob")
        data = blob[start:end]
        if sha256_bytes(data) != entry["sha256"]:
            raise IntegrityError(f"checksum mismatch for array {name}")
        arr = np.frombuffer(data, dtype=PARAM_DTYPE).reshape(shape).copy()
        if name.startswith(OPTIMIZER_PREFIX):
            optimizer[name[len(OPTIMIZER_PREFIX):]] = arr
        else:
            params[name] = arr

    typicality = manifest.get("typicality")
    return Checkpoint(
        params=params,
        step=int(manifest["step"]),
        stage=manifest["stage"],
        config=manifest["config"],
        architecture=manifest["architecture"],
        categories=list(manifest["categories"]),
        typicality=None if typicality is None else TypicalityStats.from_dict(typicality),
        extra=manifest.get("extra", {}),
        optimizer=optimizer,
    )
