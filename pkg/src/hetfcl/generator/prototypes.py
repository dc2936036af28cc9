"""Per-class prototype vectors: local inversion against a frozen backend, federated averaging, storage."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from ..utils import derive_seed, torch_generator
from .backends import GeneratorBackend

INIT_STD = 0.02


class UnseenClassError(ValueError):
    pass


class NoLocalSamples(ValueError):
    """The client holds no samples of the requested class and should skip it."""


@dataclass
class Prototype:
    class_id: int
    vector: torch.Tensor
    version: int

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise ValueError("prototype vector must be 1-D")
        if not bool(torch.isfinite(self.vector).all()):
            raise ValueError(f"prototype for class {self.class_id} has non-finite entries")

    @property
    def dim(self) -> int:
        return self.vector.numel()


def init_prototype(class_id: int, dim: int, seed: int, version: int, std: float = INIT_STD) -> Prototype:
    g = torch_generator(seed, class_id, 0x9E37)
    return Prototype(class_id, torch.randn(dim, generator=g) * std, version)


def train_prototype_round(
    backend: GeneratorBackend,
    class_id: int,
    images: torch.Tensor,
    vector: torch.Tensor,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
    optimizer: str = "adam",
    losses: list | None = None,
) -> torch.Tensor:
    """Run ``steps`` optimizer steps on the prototype loss for one class on one client.

    ``images`` are the client's unit-scale samples of ``class_id`` (N, C, H, W).
    Only the prototype moves; the backend must already be frozen.
    """
    if len(images) == 0:
        raise NoLocalSamples(f"no local samples of class {class_id}")
    if any(p.requires_grad for p in backend.parameters()):
        raise RuntimeError("backend must be frozen before prototype training")
    p = vector.detach().clone().requires_grad_(True)
    if steps == 0:
        return p.detach()
    opt = torch.optim.Adam([p], lr=lr) if optimizer == "adam" else torch.optim.SGD([p], lr=lr)
    gen = torch_generator(seed, class_id)
    n = len(images)
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        loss = backend.prototype_loss(images[idx], p[None], gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if losses is not None:
            losses.append(loss.item())
    return p.detach()


def aggregate_prototypes(local: list[torch.Tensor]) -> torch.Tensor:
    """Unweighted mean of the contributing clients' local prototypes."""
    if not local:
        raise UnseenClassError("class unseen by all clients")
    dims = {v.shape for v in local}
    if len(dims) != 1:
        raise ValueError(f"prototype dimension mismatch: {sorted(dims)}")
    return torch.stack(local).mean(0)


def federated_prototype_update(
    backend: GeneratorBackend,
    class_ids: tuple[int, ...],
    client_data: Mapping[int, tuple[torch.Tensor, torch.Tensor]],
    rounds: int,
    steps: int,
    lr: float,
    seed: int,
    version: int,
    batch_size: int = 64,
    on_round: Callable[[int], None] | None = None,
) -> tuple[dict[int, Prototype], dict[int, list[float]]]:
    """Learn one federated prototype per new class.

    Each round every client holding class i refines the current global p_i on its
    own samples; the server then averages over the contributing clients only.
    ``client_data`` maps client id -> (images, labels) of its current task.
    """
    protos = {c: init_prototype(c, backend.cond_dim, seed, version, backend.init_std) for c in class_ids}
    history: dict[int, list[float]] = {c: [] for c in class_ids}
    for q in range(rounds):
        if on_round is not None:
            on_round(q)
        for c in class_ids:
            local = []
            for k in sorted(client_data):
                images, labels = client_data[k]
                try:
                    local.append(train_prototype_round(
                        backend, c, images[labels == c], protos[c].vector, steps, lr,
                        derive_seed(seed, version, q, k), batch_size, losses=history[c]))
                except NoLocalSamples:
                    continue
            protos[c] = Prototype(c, aggregate_prototypes(local), version)
    return protos, history


# ---------------------------------------------------------------------------
# store


def manifest_hash(prototypes: Mapping[int, Prototype] | list[Prototype]) -> str:
    items = prototypes.values() if isinstance(prototypes, Mapping) else prototypes
    h = hashlib.sha256()
    for p in sorted(items, key=lambda p: (p.class_id, p.version)):
        h.update(f"{p.class_id}:{p.version}:{p.dim}|".encode())
        h.update(p.vector.detach().float().numpy().tobytes())
    return h.hexdigest()


def save_prototypes(directory: str | Path, prototypes: list[Prototype]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in sorted(prototypes, key=lambda p: (p.class_id, p.version)):
        fname = f"proto_c{p.class_id}_v{p.version}.json"
        payload = {"class_id": p.class_id, "version": p.version, "dim": p.dim,
                   "vector": [float(v) for v in p.vector.float().tolist()]}
        (d / fname).write_text(json.dumps(payload, sort_keys=True))
        entries.append({"class_id": p.class_id, "version": p.version, "file": fname})
    manifest = {"entries": entries, "hash": manifest_hash(prototypes)}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d / "manifest.json"


def load_prototypes(directory: str | Path) -> list[Prototype]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    out = []
    for e in manifest["entries"]:
        payload = json.loads((d / e["file"]).read_text())
        vec = torch.tensor(np.asarray(payload["vector"], dtype=np.float32))
        if vec.numel() != payload["dim"]:
            raise ValueError(f"{e['file']}: stored dim does not match vector length")
        out.append(Prototype(payload["class_id"], vec, payload["version"]))
    return out
