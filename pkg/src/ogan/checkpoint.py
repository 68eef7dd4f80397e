"""Single-file checkpoint container shared by every trained artifact."""

from __future__ import annotations

import io
import os
from pathlib import Path

import torch

FORMAT = "ogan-checkpoint"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, kind: str, config: dict, state: dict, **extra) -> Path:
    """Write ``{header, config, state, extra}`` atomically to ``path``.

    Everything must be picklable under ``torch.load(weights_only=True)``:
    tensors, plain containers, numbers and strings.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "header": {"format": FORMAT, "version": VERSION, "kind": kind},
        "config": config,
        "state": state,
        "extra": extra,
    }
    # serializing to a buffer keeps the archive's internal name fixed, so equal
    # contents give equal bytes whatever the file is called
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types here
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    header = payload.get("header", {}) if isinstance(payload, dict) else {}
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an {FORMAT} file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    return payload
