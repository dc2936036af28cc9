"""Client-side augmented continual training: replay on synthetic old classes, hybrid real+synthetic current task."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
import torch

from .data import ClientShard, to_tensor
from .generator.synth import SyntheticDataset
from .losses import DistillConfig, ce_loss, kl_loss
from .models import ExpandableModel, new_only, old_only, upto
from .utils import make_rng


class DataIsolationError(RuntimeError):
    pass


@dataclass
class ClientState:
    cid: int
    model: ExpandableModel
    task: int = 1
    snapshot: ExpandableModel | None = None
    shard: ClientShard | None = None
    syn_cur: SyntheticDataset | None = None
    syn_pre: SyntheticDataset | None = None
    old_view_reads: int = 0
    snapshot_reads: int = 0
    log: list[dict] = field(default_factory=list)

    def check(self) -> None:
        if (self.snapshot is not None) != (self.task > 1):
            raise AssertionError(f"client {self.cid}: snapshot presence does not match task {self.task}")
        if self.snapshot is not None and self.snapshot.num_tasks != self.task - 1:
            raise AssertionError(f"client {self.cid}: snapshot covers {self.snapshot.num_tasks} tasks, expected {self.task - 1}")


def inter_task_terms(state: ClientState, x: torch.Tensor, y: torch.Tensor,
                     cfg: DistillConfig = DistillConfig()) -> tuple[torch.Tensor, torch.Tensor]:
    """(ce, kl) of the replay objective on the live model's old-class view."""
    if state.task < 2 or state.snapshot is None:
        raise RuntimeError("inter-task loss is undefined at the first task")
    view = old_only(state.task)
    state.old_view_reads += 1
    state.snapshot_reads += 1
    logits = state.model.view_logits(x, view)
    ce = ce_loss(logits, state.model.local_labels(y, view))
    with torch.no_grad():
        teacher = torch.softmax(state.snapshot.view_logits(x, upto(state.task - 1)), 1)
    return ce, kl_loss(logits, teacher, cfg)


def local_inter_task_loss(state: ClientState, x: torch.Tensor, y: torch.Tensor,
                          cfg: DistillConfig = DistillConfig()) -> torch.Tensor:
    ce, kl = inter_task_terms(state, x, y, cfg)
    return ce + kl


def local_intra_task_loss(state: ClientState, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    view = new_only(state.task)
    logits = state.model.view_logits(x, view)
    return ce_loss(logits, state.model.local_labels(y, view))


def cycle_batches(images: torch.Tensor, labels: torch.Tensor, batch_size: int,
                  *seed_parts: int) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Endless shuffled batches; each pass reshuffles with a pass-specific seed."""
    n = len(labels)
    p = 0
    while True:
        order = torch.from_numpy(make_rng(*seed_parts, p).permutation(n))
        for idx in order.split(batch_size):
            yield images[idx], labels[idx]
        p += 1


def hybrid_pool(state: ClientState, use_syn_cur: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    if state.shard is None:
        raise RuntimeError(f"client {state.cid} has no local data for task {state.task}")
    if state.shard.owner != state.cid:
        raise DataIsolationError(f"client {state.cid} was handed client {state.shard.owner}'s data")
    if state.shard.task != state.task:
        raise DataIsolationError(f"shard is for task {state.shard.task}, client is at task {state.task}")
    x = to_tensor(state.shard.images)
    y = torch.from_numpy(state.shard.labels.astype(np.int64))
    if use_syn_cur and state.syn_cur is not None and len(state.syn_cur):
        x = torch.cat([x, state.syn_cur.images])
        y = torch.cat([y, state.syn_cur.labels])
    return x, y


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not bool(torch.isfinite(loss)):
        raise FloatingPointError(f"non-finite loss ({loss.item()}) in {where}")


def run_local_round(
    state: ClientState,
    local_rounds: int,
    local_steps: int | None,
    batch_size: int,
    lr: float,
    seed: int,
    cfg: DistillConfig = DistillConfig(),
    use_replay: bool = True,
    use_syn_cur: bool = True,
    comm_round: int = 0,
    on_epoch: Callable[[int], None] | None = None,
) -> ClientState:
    """Local SGD on intra-task CE plus (from task 2) the inter-task replay loss.

    Each optimizer step draws one hybrid batch and, when replay applies, one
    replay batch; the two losses are summed. ``local_steps=None`` means one pass
    over the hybrid pool per local round.
    """
    state.check()
    if local_rounds == 0:
        return state
    x_pool, y_pool = hybrid_pool(state, use_syn_cur)
    replay = use_replay and state.task > 1 and state.syn_pre is not None and len(state.syn_pre) > 0
    if replay:
        state.syn_pre.check_classes(state.model.view_classes(old_only(state.task)))
    opt = torch.optim.SGD(state.model.parameters(), lr=lr)
    state.model.train()
    for q in range(local_rounds):
        if on_epoch is not None:
            on_epoch(q)
        steps = local_steps or math.ceil(len(y_pool) / batch_size)
        cur = cycle_batches(x_pool, y_pool, batch_size, seed, state.cid, state.task, comm_round, q, 0)
        pre = (cycle_batches(state.syn_pre.images, state.syn_pre.labels, batch_size,
                             seed, state.cid, state.task, comm_round, q, 1) if replay else None)
        sums = {"intra": 0.0, "inter": 0.0}
        for _ in range(steps):
            x, y = next(cur)
            loss_intra = local_intra_task_loss(state, x, y)
            loss = loss_intra
            if pre is not None:
                xp, yp = next(pre)
                loss_inter = local_inter_task_loss(state, xp, yp, cfg)
                loss = loss + loss_inter
                sums["inter"] += loss_inter.item()
            check_finite(loss, f"client {state.cid} task {state.task} round {comm_round}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["intra"] += loss_intra.item()
        state.log.append({"task": state.task, "round": comm_round, "epoch": q,
                          "loss_inter": sums["inter"] / steps if pre is not None else None,
                          "loss_intra": sums["intra"] / steps})
    return state
