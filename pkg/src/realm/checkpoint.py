"""Checkpoint file format: one JSON manifest line (tensor names, shapes,
dtype, package versions, config echo) followed by the contiguous
little-endian float32 tensor payloads in manifest order. Parameters and
buffers (normalization running statistics) are both captured, so a loaded
model evaluates identically to the saved one."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import __version__

FORMAT = "realm-ckpt-1"


class CheckpointError(RuntimeError):
    pass


def _state_arrays(model: nn.Module) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, tensor in model.state_dict().items():
        out.append((name, tensor.detach().cpu().numpy().astype("<f4")))
    return out


def save_checkpoint(path: str | Path, model: nn.Module, config: dict) -> Path:
    path = Path(path)
    tensors = _state_arrays(model)
    manifest = {
        "format": FORMAT,
        "dtype": "float32",
        "versions": {"realm": __version__, "torch": torch.__version__.split("+")[0]},
        "config": config,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for _name, arr in tensors:
            fh.write(np.ascontiguousarray(arr).tobytes(order="C"))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (manifest, {tensor name: float32 array})."""
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            manifest = json.loads(fh.readline().decode("utf-8"))
        except Exception as exc:
            raise CheckpointError(f"{path}: unreadable manifest") from exc
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
        blob = fh.read()
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = 4 * int(np.prod(shape)) if shape else 4
        chunk = blob[offset : offset + size]
        if len(chunk) != size:
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing payload bytes")
    return manifest, tensors


def restore_model(model: nn.Module, tensors: dict[str, np.ndarray]) -> nn.Module:
    state = model.state_dict()
    if set(state) != set(tensors):
        missing = set(state) - set(tensors)
        extra = set(tensors) - set(state)
        raise CheckpointError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    new_state = {}
    for name, arr in tensors.items():
        want = tuple(state[name].shape)
        if tuple(arr.shape) != want:
            raise CheckpointError(f"tensor {name!r}: shape {arr.shape} != model {want}")
        new_state[name] = torch.from_numpy(arr).to(state[name].dtype)
    model.load_state_dict(new_state)
    return model
