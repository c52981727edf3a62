"""Single-file checkpoint container: a JSON header followed by a binary
parameter blob (torch archive)."""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import torch

from .errors import FormatError

_MAGIC = b"SSCK"


def save_blob(path: Path | str, header: dict, state: dict | None) -> None:
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack(">I", len(header_bytes)))
        fh.write(header_bytes)
        if state is not None:
            buf = io.BytesIO()
            torch.save(state, buf)
            fh.write(buf.getvalue())


def load_blob(path: Path | str) -> tuple[dict, dict | None]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack(">I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        rest = fh.read()
    state = torch.load(io.BytesIO(rest), weights_only=True) if rest else None
    return header, state
