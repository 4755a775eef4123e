"""Versioned ``.npz`` container shared by model, policy and detector checkpoints.

Layout: a ``__header__`` entry holding UTF-8 JSON
(``{"format", "version", "kind", "config", "extra"}``) plus one array per
named parameter. Arrays are loaded with ``allow_pickle=False``; callers that
need to store a serialized object pass its bytes as a ``uint8`` array.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "vitdeceive-container"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_container(path, kind: str, config: dict, arrays, extra: dict | None = None) -> Path:
    path = Path(path)
    header = {"format": FORMAT, "version": VERSION, "kind": kind, "config": config, "extra": extra or {}}
    payload = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, value in arrays.items():
        if name == "__header__":
            raise CheckpointError("reserved array name")
        arr = value.detach().cpu().numpy() if hasattr(value, "detach") else np.asarray(value)
        payload[name] = arr
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_container(path, expected_kind: str | None = None) -> tuple[dict, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__header__" not in data.files:
            raise CheckpointError(f"{path}: missing header")
        header = json.loads(data["__header__"].tobytes().decode())
        arrays = {k: data[k].copy() for k in data.files if k != "__header__"}
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version", 0) > VERSION:
        raise CheckpointError(f"{path}: container version {header['version']} is newer than supported {VERSION}")
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise CheckpointError(f"{path}: expected a {expected_kind!r} checkpoint, found {header.get('kind')!r}")
    return header, arrays
