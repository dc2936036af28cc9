"""Seed derivation and content hashing shared across modules."""
from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np
import torch


def derive_seed(*parts: int) -> int:
    """Mix integer parts into one 63-bit seed (order sensitive)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]))


def torch_generator(*parts: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*parts))


def tensors_hash(tensors: Iterable[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        t = t.detach().contiguous().cpu()
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    """Hash of every parameter and buffer, in state-dict order."""
    return tensors_hash(module.state_dict().values())
