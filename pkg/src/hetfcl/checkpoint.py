"""Byte-stable tensor checkpoint format.

Layout: magic line, decimal header length, JSON header (sorted keys), then the
raw little-endian bytes of every tensor in header order. Writing the same
tensors and header twice yields identical files, so a file hash doubles as a
content hash.
"""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"HETFCL-CKPT-1\n"


def write_payload(path: str | Path, header: dict, tensors: "OrderedDict[str, torch.Tensor]") -> str:
    entries = []
    blobs = []
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    head = json.dumps({"meta": header, "tensors": entries}, sort_keys=True).encode()
    data = MAGIC + str(len(head)).encode() + b"\n" + head + b"".join(blobs)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_payload(path: str | Path) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    rest = data[len(MAGIC):]
    nl = rest.index(b"\n")
    n = int(rest[:nl])
    head = json.loads(rest[nl + 1:nl + 1 + n])
    offset = len(MAGIC) + nl + 1 + n
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    for e in head["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        offset += count * dt.itemsize
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return head["meta"], tensors


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
