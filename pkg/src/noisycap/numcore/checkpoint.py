"""Checkpoint payload: a JSON manifest plus little-endian float32 parameter bytes."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "params.bin"


class CheckpointError(ValueError):
    pass


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    params: Mapping[str, np.ndarray],
    config: Mapping,
    extra: Mapping | None = None,
) -> Path:
    """Write ``params`` (in mapping order) under directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = list(params)
    shapes = [list(np.shape(params[n])) for n in names]
    with open(path / PAYLOAD, "wb") as fh:
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "param_names": names,
        "shapes": shapes,
        "config_hash": config_hash(config),
        "config": dict(config),
    }
    if extra:
        manifest["extra"] = dict(extra)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path, expect_config: Mapping | None = None):
    """Return ``(params, manifest)``; raises if the config hash does not match."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    if expect_config is not None and config_hash(expect_config) != manifest["config_hash"]:
        raise CheckpointError("checkpoint config_hash does not match the requested config")
    raw = np.frombuffer((path / PAYLOAD).read_bytes(), dtype="<f4")
    params: dict[str, np.ndarray] = {}
    off = 0
    for name, shape in zip(manifest["param_names"], manifest["shapes"]):
        n = int(np.prod(shape)) if shape else 1
        params[name] = raw[off : off + n].astype(np.float32).reshape(shape)
        off += n
    if off != raw.size:
        raise CheckpointError(f"payload size {raw.size} != manifest total {off}")
    return params, manifest
