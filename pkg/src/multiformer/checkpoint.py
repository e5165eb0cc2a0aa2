"""Checkpoint serialization.

Layout: the magic line ``MFTC1``, a text manifest (one line per
parameter: name, dtype, comma-separated shape, byte offset into the
payload), a blank line, then the raw little-endian float32 payload
concatenated in manifest order.
"""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .exceptions import FormatError

MAGIC = b"MFTC1\n"


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    lines = []
    chunks = []
    offset = 0
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        shape_csv = ",".join(str(s) for s in tensor.shape)
        lines.append(f"{name} f32 {shape_csv} {offset}")
        chunks.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write("\n".join(lines).encode("ascii"))
        fh.write(b"\n\n")
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise FormatError(f"{path}: missing checkpoint magic {MAGIC!r}")
    split = blob.find(b"\n\n", len(MAGIC) - 1)
    if split < 0:
        raise FormatError(f"{path}: no blank line terminating the manifest")
    manifest = blob[len(MAGIC) : split].decode("ascii")
    payload = blob[split + 2 :]

    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for lineno, line in enumerate(manifest.splitlines(), start=2):
        fields = line.split()
        if len(fields) != 4:
            raise FormatError(f"{path}:{lineno}: expected 'name dtype shape offset', got {line!r}")
        name, dtype, shape_csv, offset_s = fields
        if dtype != "f32":
            raise FormatError(f"{path}:{lineno}: unknown dtype {dtype!r}")
        shape = tuple(int(s) for s in shape_csv.split(","))
        offset = int(offset_s)
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(payload):
            raise FormatError(
                f"{path}:{lineno}: parameter {name!r} needs bytes [{offset}, {offset + nbytes}) "
                f"but payload has {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=offset)
        out[name] = arr.reshape(shape).astype(np.float32)
    return out
