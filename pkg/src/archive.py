"""
Checkpoint archive: ``manifest.json`` + ``weights.bin``.

``weights.bin`` is the concatenation of little-endian float32 tensors; the
manifest records each tensor's name (``<module>/<parameter>``), shape, dtype and
byte offset, plus a config echo and free-form extras.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np
import torch
from torch import nn

from .errors import DependencyError

WEIGHT_DTYPE = np.dtype("<f4")


@dataclass
class CheckpointArchive:
    tensors: Dict[str, torch.Tensor]
    config: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def state_dict(self, prefix: str) -> Dict[str, torch.Tensor]:
        """Tensors stored under ``prefix/``, with the prefix stripped."""
        head = prefix + "/"
        return {name[len(head) :]: t for name, t in self.tensors.items() if name.startswith(head)}

    def has(self, prefix: str) -> bool:
        return any(name.startswith(prefix + "/") for name in self.tensors)

    def load_into(self, prefix: str, module: nn.Module) -> None:
        module.load_state_dict(self.state_dict(prefix))


def weights_digest(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_archive(
    path: str | Path,
    modules: Mapping[str, nn.Module],
    config: Dict[str, Any] | None = None,
    extra: Dict[str, Any] | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    records = []
    blobs = []
    offset = 0
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            blob = tensor.detach().cpu().numpy().astype(WEIGHT_DTYPE).tobytes()
            records.append(
                {
                    "name": f"{prefix}/{name}",
                    "shape": list(tensor.shape),
                    "dtype": "float32-le",
                    "offset": offset,
                    "nbytes": len(blob),
                }
            )
            blobs.append(blob)
            offset += len(blob)

    manifest = {"tensors": records, "config": config or {}, "extra": extra or {}}
    weights_tmp = path / "weights.bin.tmp"
    weights_tmp.write_bytes(b"".join(blobs))
    os.replace(weights_tmp, path / "weights.bin")
    manifest_tmp = path / "manifest.json.tmp"
    manifest_tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(manifest_tmp, path / "manifest.json")
    return path


def load_archive(path: str | Path) -> CheckpointArchive:
    path = Path(path)
    manifest_path = path / "manifest.json"
    weights_path = path / "weights.bin"
    if not manifest_path.exists() or not weights_path.exists():
        raise DependencyError(f"No checkpoint archive at {path}", path=str(path))

    manifest = json.loads(manifest_path.read_text())
    raw = weights_path.read_bytes()
    tensors = {}
    for record in manifest["tensors"]:
        start, stop = record["offset"], record["offset"] + record["nbytes"]
        if stop > len(raw):
            raise DependencyError(
                f"weights.bin is truncated at tensor {record['name']}", path=str(weights_path)
            )
        array = np.frombuffer(raw[start:stop], dtype=WEIGHT_DTYPE).reshape(record["shape"])
        tensors[record["name"]] = torch.from_numpy(array.astype(np.float32))
    return CheckpointArchive(
        tensors=tensors, config=manifest.get("config", {}), extra=manifest.get("extra", {})
    )
