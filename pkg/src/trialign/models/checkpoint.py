"""Checkpoints: an uncompressed ``.npz`` key -> array map.

Each array keeps its dtype and shape header, so a save/load round trip is
bit-exact. Two reserved keys sit beside the tensors: ``__format_version__``
and ``__meta__`` (a JSON string).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_RESERVED = ("__format_version__", "__meta__")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    bad = [k for k in tensors if k in _RESERVED]
    if bad:
        raise CheckpointError(f"reserved checkpoint keys used: {bad}")
    payload = {k: np.asarray(v) for k, v in tensors.items()}
    payload["__format_version__"] = np.array(FORMAT_VERSION, dtype=np.int64)
    payload["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{path} is not a readable checkpoint ({e})") from None
    if "__format_version__" not in data:
        raise CheckpointError(f"{path} has no format version")
    version = int(data.pop("__format_version__"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {version} (expected {FORMAT_VERSION})")
    meta = json.loads(str(data.pop("__meta__"))) if "__meta__" in data else {}
    return data, meta
