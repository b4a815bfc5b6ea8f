"""Small shared helpers: sub-seed derivation and atomic file writes."""
from __future__ import annotations

import io
import json
import os
import tempfile
import zlib
from pathlib import Path

import torch


def derive_seed(base: int, *tags) -> int:
    """Stable 31-bit sub-seed for a named component under a global seed.

    Every stochastic piece of a run (noise, batch order, augmentation, model
    init) draws its own seed through this function so that one global seed
    reproduces the whole pipeline and sub-streams stay decoupled.
    """
    h = zlib.crc32(repr(int(base)).encode())
    for tag in tags:
        h = zlib.crc32(str(tag).encode(), h)
    return h & 0x7FFFFFFF


def _atomic_replace(path: Path, write_fn) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: Path, data: bytes) -> None:
    _atomic_replace(path, lambda fh: fh.write(data))


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: Path, obj, indent: int = 2) -> None:
    atomic_write_text(path, json.dumps(obj, indent=indent) + "\n")


def atomic_torch_save(obj, path: Path) -> None:
    buf = io.BytesIO()
    torch.save(obj, buf)
    atomic_write_bytes(path, buf.getvalue())
