"""Checkpoint archives: named float32 arrays plus a JSON manifest, in one .npz."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

_MANIFEST_KEY = "__manifest__"


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], manifest: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {name: np.asarray(a, dtype=np.float32) for name, a in arrays.items()}
    payload[_MANIFEST_KEY] = np.frombuffer(json.dumps(dict(manifest), sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    path.write_bytes(buf.getvalue())
    return path


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files if k != _MANIFEST_KEY}
        manifest = json.loads(data[_MANIFEST_KEY].tobytes().decode()) if _MANIFEST_KEY in data.files else {}
    return arrays, manifest


def state_to_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    current = module.state_dict()
    state = {}
    for name, ref in current.items():
        key = prefix + name
        if key not in arrays:
            raise KeyError(f"checkpoint is missing {key!r}")
        state[name] = torch.as_tensor(arrays[key]).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)


def digest_of(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
