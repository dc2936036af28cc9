"""Labeled synthetic datasets sampled from prototypes, plus an on-disk cache."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from ..utils import derive_seed, make_rng, torch_generator
from .backends import GeneratorBackend
from .prototypes import Prototype, manifest_hash

PROVENANCE = ("client_current", "client_replay", "server_current", "server_replay")


@dataclass(eq=False)
class SyntheticDataset:
    images: torch.Tensor  # (N, C, H, W), unit scale
    labels: torch.Tensor  # (N,) long
    provenance: str
    versions: dict[int, int] = field(default_factory=dict)  # class id -> prototype version

    def __post_init__(self):
        if self.provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        stray = set(self.labels.unique().tolist()) - set(self.versions)
        if stray:
            raise ValueError(f"labels {sorted(stray)} have no generating prototype")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_server(self) -> bool:
        return self.provenance.startswith("server_")

    def check_classes(self, allowed: Sequence[int]) -> None:
        stray = set(self.labels.unique().tolist()) - set(allowed)
        if stray:
            raise ValueError(f"{self.provenance} set contains classes {sorted(stray)} outside {sorted(allowed)}")

    def batches(self, batch_size: int, seed: int) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        order = torch.from_numpy(make_rng(seed).permutation(len(self)))
        for idx in order.split(batch_size):
            yield self.images[idx], self.labels[idx]


def per_class_count(total: int, num_classes: int) -> int:
    """Split a set-level sample budget evenly over its classes (at least one each)."""
    if total <= 0 or num_classes == 0:
        return 0
    return max(1, total // num_classes)


def synthesize(backend: GeneratorBackend, prototypes: Sequence[Prototype], count: int, seed: int,
               provenance: str) -> SyntheticDataset:
    """Sample ``count`` images per prototype, each labeled with its conditioning class."""
    protos = sorted(prototypes, key=lambda p: p.class_id)
    if len({p.class_id for p in protos}) != len(protos):
        raise ValueError("duplicate class ids in prototype set")
    versions = {p.class_id: p.version for p in protos}
    c, h, w = backend.image_shape
    if count == 0 or not protos:
        return SyntheticDataset(torch.empty(0, c, h, w), torch.empty(0, dtype=torch.long), provenance, versions)
    cond = torch.cat([p.vector.float()[None].expand(count, -1) for p in protos])
    labels = torch.tensor([p.class_id for p in protos for _ in range(count)], dtype=torch.long)
    images = backend.sample(cond, torch_generator(seed, count))
    return SyntheticDataset(images.float(), labels, provenance, versions)


class SyntheticCache:
    """Directory of sampled sets keyed by (backend, prototype manifest, count, seed, provenance)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0

    def key(self, backend: GeneratorBackend, prototypes: Sequence[Prototype], count: int, seed: int,
            provenance: str) -> str:
        raw = f"{backend.content_hash()}|{manifest_hash(list(prototypes))}|{count}|{seed}|{provenance}"
        return hashlib.sha256(raw.encode()).hexdigest()[:32]

    def get_or_create(self, backend, prototypes, count, seed, provenance) -> SyntheticDataset:
        path = self.root / f"{self.key(backend, prototypes, count, seed, provenance)}.npz"
        if path.exists():
            self.hits += 1
            z = np.load(path)
            versions = dict(zip(z["v_cls"].tolist(), z["v_ver"].tolist()))
            return SyntheticDataset(torch.from_numpy(z["images"]), torch.from_numpy(z["labels"]),
                                    provenance, versions)
        ds = synthesize(backend, prototypes, count, seed, provenance)
        np.savez(path, images=ds.images.numpy(), labels=ds.labels.numpy(),
                 v_cls=np.array(list(ds.versions), dtype=np.int64),
                 v_ver=np.array(list(ds.versions.values()), dtype=np.int64))
        return ds


def synthesis_seed(run_seed: int, task: int, round_: int, tag: int) -> int:
    return derive_seed(run_seed, task, round_, tag)
