"""Single-file checkpoint archive.

Layout (a zip file)::

    manifest.json   format_version, kind, epoch, config snapshot, metadata,
                    and a tensor index {name: {"shape": [...], "offset": int}}
    tensors.bin     concatenated little-endian float32 payloads
    rng.bin         torch CPU generator state
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ..errors import CheckpointVersionError

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: dict[str, Any]
    tensors: dict[str, torch.Tensor]
    kind: str = "student"
    epoch: int = 0
    rng_state: bytes = b""
    metadata: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        """State dict of the tensors stored under ``prefix.``."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        index, blob, offset = {}, io.BytesIO(), 0
        for name in sorted(self.tensors):
            t = self.tensors[name]
            if not t.is_floating_point():
                raise TypeError(f"tensor {name} is not floating point")
            arr = t.detach().cpu().to(torch.float32).numpy().astype(_DTYPE, copy=False)
            data = np.ascontiguousarray(arr).tobytes()
            index[name] = {"shape": list(arr.shape), "offset": offset}
            blob.write(data)
            offset += len(data)
        manifest = {
            "format_version": self.format_version,
            "kind": self.kind,
            "epoch": self.epoch,
            "config": self.config,
            "metadata": self.metadata,
            "dtype": "float32-le",
            "tensors": index,
        }
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            _write(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
            _write(zf, "tensors.bin", blob.getvalue())
            _write(zf, "rng.bin", self.rng_state)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("tensors.bin")
            rng = zf.read("rng.bin")
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")
        tensors = {}
        for name, entry in manifest["tensors"].items():
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=entry["offset"])
            tensors[name] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
        return cls(manifest["config"], tensors, manifest["kind"], manifest["epoch"], rng,
                   manifest.get("metadata", {}), version)


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    # fixed timestamp keeps archives byte-reproducible
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def pack(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v.detach().clone() for k, v in module.state_dict().items()}
