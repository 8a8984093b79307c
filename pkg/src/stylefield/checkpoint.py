"""Checkpoint format shared by every trained component: a manifest.json
listing named tensors {name, shape, dtype, byte_offset} plus one raw
little-endian float32 blob."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from stylefield.errors import DatasetFormatError

BLOB_NAME = "tensors.bin"
MANIFEST_NAME = "manifest.json"


def save_tensors(tensors: dict[str, torch.Tensor], directory) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).numpy()
        data = np.ascontiguousarray(arr).astype("<f4").tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f32", "byte_offset": offset}
        )
        offset += len(data)
        chunks.append(data)
    (root / BLOB_NAME).write_bytes(b"".join(chunks))
    manifest = {"tensors": entries, "blob": BLOB_NAME, "total_bytes": offset}
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))


def load_tensors(directory) -> dict[str, torch.Tensor]:
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetFormatError(f"missing {MANIFEST_NAME} under {root}")
    manifest = json.loads(manifest_path.read_text())
    blob = (root / manifest["blob"]).read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        out[entry["name"]] = torch.from_numpy(arr.copy())
    return out


def save_module(module: torch.nn.Module, directory) -> None:
    save_tensors(dict(module.state_dict()), directory)


def load_module(module: torch.nn.Module, directory) -> None:
    state = load_tensors(directory)
    target = module.state_dict()
    missing = set(target) - set(state)
    if missing:
        raise DatasetFormatError(f"checkpoint missing tensors: {sorted(missing)}")
    module.load_state_dict({k: state[k].to(v.dtype).reshape(v.shape) for k, v in target.items()})


def tensor_hashes(tensors: dict[str, torch.Tensor]) -> dict[str, str]:
    out = {}
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).numpy()
        data = np.ascontiguousarray(arr).astype("<f4").tobytes()
        out[name] = hashlib.sha256(data).hexdigest()
    return out


def checkpoint_hash(directory) -> str:
    """Single digest over the blob file; used for pipeline cache keys."""
    blob = Path(directory) / BLOB_NAME
    return hashlib.sha256(blob.read_bytes()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
