"""Shared checkpoint format.

Layout: magic line ``SSVAE01\\n``, zero or more ``meta <key> <value>`` lines,
one ``tensor <name> f32 <d0,d1,...>`` line per entry, an ``end`` line, then
the raw little-endian float32 payloads concatenated in header order. The
round trip is bit-exact.
"""

from __future__ import annotations

import numpy as np

MAGIC = b"SSVAE01\n"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, entries: dict[str, np.ndarray], meta: dict[str, str] | None = None):
    meta = meta or {}
    lines = []
    for key, value in meta.items():
        key, value = str(key), str(value)
        if " " in key or "\n" in key or "\n" in value:
            raise CheckpointError(f"illegal meta entry {key!r}")
        lines.append(f"meta {key} {value}\n")
    arrays = []
    for name, arr in entries.items():
        if " " in name or "\n" in name:
            raise CheckpointError(f"illegal tensor name {name!r}")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else "1"
        lines.append(f"tensor {name} f32 {shape}\n")
        arrays.append(arr)
    lines.append("end\n")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write("".join(lines).encode("ascii"))
        for arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    header_end = blob.find(b"end\n", len(MAGIC))
    if header_end < 0:
        raise CheckpointError(f"{path}: truncated header")
    header = blob[len(MAGIC):header_end].decode("ascii")
    payload = blob[header_end + 4:]

    meta: dict[str, str] = {}
    specs: list[tuple[str, tuple[int, ...]]] = []
    for line in header.splitlines():
        if not line:
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = value
        elif kind == "tensor":
            name, dtype, shape_s = rest.split(" ")
            if dtype != "f32":
                raise CheckpointError(f"{path}: unsupported dtype {dtype!r}")
            shape = tuple(int(d) for d in shape_s.split(","))
            specs.append((name, shape))
        else:
            raise CheckpointError(f"{path}: unknown header line {line!r}")

    entries: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in specs:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        entries[name] = arr.copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return entries, meta
