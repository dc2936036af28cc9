"""Classification and distillation losses shared by clients and server."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .models import ExpandableModel, LogitView

ENSEMBLE_MODES = ("prob_mean", "logit_mean")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; ``labels`` are view-local column indices."""
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ValueError(f"label outside the {logits.shape[1]}-class view")
    return F.cross_entropy(logits, labels)


def soften(probs: torch.Tensor, temperature: float) -> torch.Tensor:
    """Re-temper a distribution: equivalent to dividing its logits by ``temperature``."""
    if temperature == 1.0:
        return probs
    logp = torch.log(probs.clamp_min(1e-30)) / temperature
    out = torch.softmax(logp, dim=1)
    return torch.where(probs > 0, out, torch.zeros_like(out))


def kl_loss(student_logits: torch.Tensor, teacher_probs: torch.Tensor,
            config: DistillConfig = DistillConfig()) -> torch.Tensor:
    """Batch-mean KL(teacher || student) at temperature tau, scaled by tau^2.

    The teacher side is detached.
    """
    if student_logits.shape != teacher_probs.shape:
        raise ValueError(f"student {tuple(student_logits.shape)} vs teacher {tuple(teacher_probs.shape)}")
    tau = config.temperature
    target = soften(teacher_probs.detach().to(student_logits.dtype), tau)
    log_student = F.log_softmax(student_logits / tau, dim=1)
    per_row = (torch.xlogy(target, target) - target * log_student).sum(1)
    return per_row.mean() * tau * tau


def average_probs(logits: Sequence[torch.Tensor], mode: str = "prob_mean") -> torch.Tensor:
    """Uniform ensemble of teacher outputs, summed in the given order."""
    if not logits:
        raise ValueError("empty ensemble")
    if mode == "prob_mean":
        acc = torch.softmax(logits[0], 1)
        for z in logits[1:]:
            acc = acc + torch.softmax(z, 1)
        return acc / len(logits)
    if mode == "logit_mean":
        acc = logits[0]
        for z in logits[1:]:
            acc = acc + z
        return torch.softmax(acc / len(logits), 1)
    raise ValueError(f"unknown ensemble mode {mode!r}; expected one of {ENSEMBLE_MODES}")


@dataclass
class EnsembleTeacher:
    """Uniformly weighted teachers, each read through its own view of a shared class set."""

    members: list[tuple[ExpandableModel, LogitView]]
    mode: str = "prob_mean"

    def __post_init__(self):
        if not self.members:
            raise ValueError("empty ensemble")
        sets = {m.view_classes(v) for m, v in self.members}
        if len(sets) != 1:
            raise ValueError("ensemble members disagree on the class set")

    @property
    def classes(self) -> tuple[int, ...]:
        m, v = self.members[0]
        return m.view_classes(v)

    @property
    def weights(self) -> list[float]:
        return [1.0 / len(self.members)] * len(self.members)

    @torch.no_grad()
    def probs(self, x: torch.Tensor) -> torch.Tensor:
        return average_probs([m.view_logits(x, v) for m, v in self.members], self.mode)


def ensemble_probs(teachers: EnsembleTeacher, batch: torch.Tensor) -> torch.Tensor:
    return teachers.probs(batch)
