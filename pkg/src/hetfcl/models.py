"""Heterogeneous CNN classifiers with task-expandable heads.

A model is a shared extractor followed by one head block per task. Each block is
evaluated separately and the outputs concatenated, so appending a block never
changes the bits of earlier logits. Head blocks are plain linear layers or
cosine classifiers sharing one fixed logit scale (``head="cosine"``).

Grayscale configs (28x28x1):

=======  =====================================  ===========
tag      extractor                              feature dim
=======  =====================================  ===========
L        4 conv (8-16-32-48, 3x3) + FC          128
server   same as L                              128
M        2 conv (12-24, 5x5) + FC               96
S        2 conv (6-12, 5x5) + FC                64
=======  =====================================  ===========
"""
from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import read_payload, write_payload
from .utils import derive_seed

ARCHS = ("L", "M", "S", "server")
HEAD_KINDS = ("linear", "cosine")
COSINE_SCALE = 10.0
VIEW_KINDS = ("old_only", "new_only", "upto")


@dataclass(frozen=True)
class LogitView:
    kind: str
    task: int

    def __post_init__(self):
        if self.kind not in VIEW_KINDS:
            raise ValueError(f"unknown view kind {self.kind!r}")


def old_only(t: int) -> LogitView:
    return LogitView("old_only", t)


def new_only(t: int) -> LogitView:
    return LogitView("new_only", t)


def upto(t: int) -> LogitView:
    return LogitView("upto", t)


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if c % 4 == 0 else 2, c)


def _conv(cin: int, cout: int, k: int, pad: int = 0) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, k, padding=pad), _gn(cout), nn.ReLU()]


def _extractor(arch: str, channels: int) -> tuple[nn.Sequential, int]:
    if arch in ("L", "server"):
        convs = [*_conv(channels, 8, 3, 1), nn.MaxPool2d(2), *_conv(8, 16, 3, 1), *_conv(16, 32, 3, 1),
                 nn.MaxPool2d(2), *_conv(32, 48, 3, 1), nn.MaxPool2d(2)]
        feat = 128
    elif arch == "M":
        convs = [*_conv(channels, 12, 5), nn.MaxPool2d(2), *_conv(12, 24, 5), nn.MaxPool2d(2)]
        feat = 96
    elif arch == "S":
        convs = [*_conv(channels, 6, 5), nn.MaxPool2d(2), *_conv(6, 12, 5), nn.MaxPool2d(2)]
        feat = 64
    else:
        raise ValueError(f"unknown architecture tag {arch!r}; expected one of {ARCHS}")
    return nn.Sequential(*convs, nn.Flatten()), feat


class CosineHead(nn.Module):
    """Scaled cosine similarity between features and per-class weight vectors."""

    def __init__(self, in_features: int, out_features: int, scale: float = COSINE_SCALE):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)
        self.scale = scale

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.scale * F.normalize(h, dim=1) @ F.normalize(self.weight, dim=1).T


class ExpandableModel(nn.Module):
    def __init__(self, arch: str, input_shape: tuple[int, int, int], seed: int, head: str = "linear"):
        super().__init__()
        if head not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {head!r}; expected one of {HEAD_KINDS}")
        self.head_kind = head
        convs, feat = _extractor(arch, input_shape[0])
        with torch.no_grad():
            flat = convs(torch.zeros((1,) + tuple(input_shape))).shape[1]
        self.extractor = nn.Sequential(*convs, nn.Linear(flat, feat), nn.ReLU())
        self.heads = nn.ModuleList()
        self.block_classes: list[tuple[int, ...]] = []
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.feat_dim = feat
        self.seed = seed

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(c for block in self.block_classes for c in block)

    def _blocks(self, view: LogitView) -> range:
        t = view.task
        if t > self.num_tasks:
            raise ValueError(f"view {view.kind}({t}) references a task the model has not reached ({self.num_tasks})")
        if view.kind == "old_only":
            if t < 2:
                raise ValueError("old_only view needs at least one previous task")
            return range(0, t - 1)
        if view.kind == "new_only":
            return range(t - 1, t)
        return range(0, t)

    def view_classes(self, view: LogitView) -> tuple[int, ...]:
        return tuple(c for b in self._blocks(view) for c in self.block_classes[b])

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.extractor(x)

    def logits_from_features(self, h: torch.Tensor, view: LogitView) -> torch.Tensor:
        return torch.cat([self.heads[b](h) for b in self._blocks(view)], dim=1)

    def view_logits(self, x: torch.Tensor, view: LogitView) -> torch.Tensor:
        return self.logits_from_features(self.features(x), view)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.view_logits(x, upto(self.num_tasks))

    def local_labels(self, labels: torch.Tensor, view: LogitView) -> torch.Tensor:
        """Map global class ids to column positions of ``view``."""
        pos = {c: i for i, c in enumerate(self.view_classes(view))}
        try:
            return torch.tensor([pos[int(y)] for y in labels], dtype=torch.long)
        except KeyError as e:
            raise ValueError(f"label {e.args[0]} is outside the {view.kind}({view.task}) view") from None

    def add_block(self, classes: Sequence[int]) -> None:
        t = self.num_tasks + 1
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(self.seed, t, 0xB10C))
            if self.head_kind == "cosine":
                head = CosineHead(self.feat_dim, len(classes))
            else:
                head = nn.Linear(self.feat_dim, len(classes))
        self.heads.append(head)
        self.block_classes.append(tuple(int(c) for c in classes))


def build_model(arch: str, input_shape: tuple[int, int, int], classes: Sequence[int] | int,
                seed: int, head: str = "linear") -> ExpandableModel:
    """Fresh model with a single head block; initialization depends only on ``seed``."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture tag {arch!r}; expected one of {ARCHS}")
    if isinstance(classes, int):
        classes = range(classes)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, 0xA5C4))
        model = ExpandableModel(arch, input_shape, seed, head)
    model.add_block(classes)
    return model


def expand_head(model: ExpandableModel, new_classes: Sequence[int]) -> ExpandableModel:
    """Append a freshly initialized head block for ``new_classes`` (in place)."""
    new_classes = tuple(int(c) for c in new_classes)
    if not new_classes:
        return model
    overlap = set(new_classes) & set(model.classes)
    if overlap:
        raise ValueError(f"classes {sorted(overlap)} are already covered")
    model.add_block(new_classes)
    return model


def view_logits(model: ExpandableModel, x: torch.Tensor, view: LogitView) -> torch.Tensor:
    return model.view_logits(x, view)


def snapshot(model: ExpandableModel) -> ExpandableModel:
    """Frozen deep copy used as a teacher."""
    snap = copy.deepcopy(model)
    for p in snap.parameters():
        p.requires_grad_(False)
    return snap.eval()


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_model(path: str | Path, model: ExpandableModel, extra: dict | None = None) -> str:
    header = {"arch": model.arch, "head": model.head_kind, "input_shape": list(model.input_shape), "seed": model.seed,
              "blocks": [list(b) for b in model.block_classes]}
    header.update(extra or {})
    return write_payload(path, header, OrderedDict(model.state_dict()))


def load_model(path: str | Path) -> ExpandableModel:
    meta, tensors = read_payload(path)
    model = build_model(meta["arch"], tuple(meta["input_shape"]), meta["blocks"][0], meta["seed"],
                        meta.get("head", "linear"))
    for block in meta["blocks"][1:]:
        expand_head(model, block)
    model.load_state_dict(tensors)
    return model
