"""Checkpoint files: a text manifest followed by a flat little-endian float64
payload.

    HIPA-CKPT 1
    key value                 (metadata, zero or more lines)
    tensor <name> <group> <d0>x<d1>x... <offset>
    ...
    END
    <raw float64 payload, offsets counted in values>
"""
from __future__ import annotations

import numpy as np

MAGIC = "HIPA-CKPT 1"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, tensors: dict, groups: dict | None = None, meta: dict | None = None) -> None:
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        lines.append(f"meta {k} {v}")
    offset = 0
    chunks = []
    for name in sorted(tensors):
        a = np.ascontiguousarray(tensors[name], dtype="<f8")
        shape = "x".join(str(d) for d in a.shape) or "scalar"
        lines.append(f"tensor {name} {(groups or {}).get(name, '-')} {shape} {offset}")
        offset += a.size
        chunks.append(a.tobytes())
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for c in chunks:
            fh.write(c)


def read_checkpoint(path):
    """Returns (tensors, groups, meta)."""
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"\nEND\n")
    if not data.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint")
    header = data[:end].decode("ascii").split("\n")[1:]
    payload = np.frombuffer(data[end + 5:], dtype="<f8")
    tensors, groups, meta = {}, {}, {}
    for line in header:
        parts = line.split(" ")
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
            continue
        if parts[0] != "tensor" or len(parts) != 5:
            raise CheckpointError(f"{path}: bad manifest line {line!r}")
        _, name, group, shape, offset = parts
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        n = int(np.prod(dims, dtype=np.int64))
        off = int(offset)
        if off + n > payload.size:
            raise CheckpointError(f"{path}: payload truncated at {name}")
        tensors[name] = payload[off:off + n].astype(np.float64).reshape(dims)
        if group != "-":
            groups[name] = group
    return tensors, groups, meta
