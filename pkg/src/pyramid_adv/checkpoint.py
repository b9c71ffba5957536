"""Single-file archive of named arrays plus a JSON metadata header.

Layout: 8-byte magic, u64 header length, canonical JSON header, then raw
little-endian C-order array bytes in header order. The encoding is fully
deterministic (sorted keys, sorted array names), so saving what was just
loaded reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PYRADVCK"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}


class CheckpointError(Exception):
    pass


def save_archive(path: str | Path, arrays: dict[str, torch.Tensor], meta: dict) -> None:
    entries = []
    blobs = []
    for name in sorted(arrays):
        t = arrays[name].detach().cpu().contiguous()
        dtype = str(t.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for array {name!r}")
        entries.append({"name": name, "dtype": dtype, "shape": list(t.shape)})
        blobs.append(t.numpy().tobytes())
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_archive(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version} != supported {FORMAT_VERSION}"
            )
        arrays: dict[str, torch.Tensor] = {}
        for entry in header["arrays"]:
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * torch.empty((), dtype=dtype).element_size()
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
            t = torch.frombuffer(bytearray(raw), dtype=dtype) if nbytes else torch.empty(0, dtype=dtype)
            arrays[entry["name"]] = t.reshape(shape).clone()
    return arrays, header["meta"]
