"""Regularizers and aggregation used by the comparison strategies."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch.func import functional_call, grad, vmap

from .client import ClientState, check_finite, cycle_batches
from .data import to_tensor
from .losses import DistillConfig, ce_loss, kl_loss
from .models import ExpandableModel, old_only, upto
from .utils import make_rng

Regularizer = Callable[[ExpandableModel, torch.Tensor], torch.Tensor]


@torch.no_grad()
def average_models(target: ExpandableModel, sources: Sequence[ExpandableModel]) -> ExpandableModel:
    """Unweighted parameter mean of ``sources`` written into ``target`` (sources summed in order)."""
    if not sources:
        raise ValueError("nothing to average")
    states = [s.state_dict() for s in sources]
    merged = {}
    for name in states[0]:
        acc = states[0][name].clone()
        for st in states[1:]:
            acc += st[name]
        merged[name] = acc / len(states)
    target.load_state_dict(merged)
    return target


def estimate_fisher(model: ExpandableModel, images: torch.Tensor, labels: torch.Tensor, samples: int,
                    seed: int, chunk: int = 256) -> dict[str, torch.Tensor]:
    """Diagonal empirical Fisher: mean squared per-sample gradient of the true-label log-likelihood.

    Uses the model's full current view and at most ``samples`` randomly chosen examples.
    """
    n = min(samples, len(labels))
    idx = torch.from_numpy(np.sort(make_rng(seed).choice(len(labels), n, replace=False)))
    x, y = images[idx], model.local_labels(labels[idx], upto(model.num_tasks))
    params = {k: v.detach() for k, v in model.named_parameters()}

    def nll(p, xi, yi):
        logits = functional_call(model, p, (xi[None],))
        return torch.nn.functional.cross_entropy(logits, yi[None])

    per_sample = vmap(grad(nll), in_dims=(None, 0, 0))
    fisher = {k: torch.zeros_like(v) for k, v in params.items()}
    for s in range(0, n, chunk):
        g = per_sample(params, x[s:s + chunk], y[s:s + chunk])
        for k in fisher:
            fisher[k] += (g[k] ** 2).sum(0)
    return {k: v / n for k, v in fisher.items()}


@dataclass
class EWCPenalty:
    """lam/2 * sum_i F_i (theta_i - anchor_i)^2 over parameters present at the anchor."""

    fisher: dict[str, torch.Tensor]
    anchor: dict[str, torch.Tensor]
    lam: float

    def __call__(self, model: ExpandableModel, x: torch.Tensor | None = None) -> torch.Tensor:
        total = torch.zeros(())
        for name, p in model.named_parameters():
            if name in self.fisher:
                total = total + (self.fisher[name] * (p - self.anchor[name]) ** 2).sum()
        return 0.5 * self.lam * total

    def extend(self, fisher: dict[str, torch.Tensor], anchor: dict[str, torch.Tensor]) -> "EWCPenalty":
        """Accumulate a new task's Fisher and move the anchor to the latest weights."""
        merged = {k: v.clone() for k, v in fisher.items()}
        for k, v in self.fisher.items():
            if k in merged:
                merged[k] += v
        return EWCPenalty(merged, {k: v.detach().clone() for k, v in anchor.items()}, self.lam)


def ewc_penalty(model: ExpandableModel, images, labels, lam: float, samples: int, seed: int,
                previous: EWCPenalty | None = None) -> EWCPenalty:
    fisher = estimate_fisher(model, images, labels, samples, seed)
    anchor = {k: v.detach().clone() for k, v in model.named_parameters()}
    if previous is None:
        return EWCPenalty(fisher, anchor, lam)
    return previous.extend(fisher, anchor)


def lwf_regularizer(teacher: ExpandableModel, task: int, cfg: DistillConfig) -> Regularizer:
    """KL from a frozen previous-task model on the live model's old-class view."""

    def reg(model: ExpandableModel, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            target = torch.softmax(teacher.view_logits(x, upto(task - 1)), 1)
        return kl_loss(model.view_logits(x, old_only(task)), target, cfg)

    return reg


def run_plain_local(state: ClientState, local_rounds: int, local_steps: int | None, batch_size: int,
                    lr: float, seed: int, regularizer: Regularizer | None = None, comm_round: int = 0,
                    on_epoch: Callable[[int], None] | None = None) -> ClientState:
    """Local SGD on cross-entropy over all classes seen so far, using real current-task data only."""
    if state.shard is None or state.shard.owner != state.cid:
        raise RuntimeError(f"client {state.cid} has no data of its own for task {state.task}")
    x_pool = to_tensor(state.shard.images)
    y_pool = torch.from_numpy(state.shard.labels.astype(np.int64))
    view = upto(state.task)
    opt = torch.optim.SGD(state.model.parameters(), lr=lr)
    state.model.train()
    for q in range(local_rounds):
        if on_epoch is not None:
            on_epoch(q)
        steps = local_steps or math.ceil(len(y_pool) / batch_size)
        batches = cycle_batches(x_pool, y_pool, batch_size, seed, state.cid, state.task, comm_round, q, 2)
        tot_ce, tot_reg = 0.0, 0.0
        for _ in range(steps):
            x, y = next(batches)
            ce = ce_loss(state.model.view_logits(x, view), state.model.local_labels(y, view))
            loss = ce
            if regularizer is not None:
                r = regularizer(state.model, x)
                loss = loss + r
                tot_reg += r.item()
            check_finite(loss, f"client {state.cid} task {state.task} round {comm_round}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_ce += ce.item()
        state.log.append({"task": state.task, "round": comm_round, "epoch": q,
                          "loss_ce": tot_ce / steps, "loss_reg": tot_reg / steps if regularizer else None})
    return state
