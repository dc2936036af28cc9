"""Server-side multi-teacher distillation and the feedback pass to clients.

The server never sees client data: every entry point takes server-side
``SyntheticDataset`` objects and model predictions only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .client import ClientState, check_finite
from .generator.synth import SyntheticDataset
from .losses import DistillConfig, EnsembleTeacher, kl_loss
from .models import ExpandableModel, LogitView, new_only, old_only, upto
from .utils import make_rng


@dataclass
class ServerState:
    model: ExpandableModel
    task: int = 1
    snapshot: ExpandableModel | None = None
    syn_cur: SyntheticDataset | None = None
    syn_pre: SyntheticDataset | None = None
    log: list[dict] = field(default_factory=list)

    def check(self) -> None:
        if (self.snapshot is not None) != (self.task > 1):
            raise AssertionError(f"server snapshot presence does not match task {self.task}")
        for ds in (self.syn_cur, self.syn_pre):
            if ds is not None:
                require_server_set(ds)


def require_server_set(ds) -> SyntheticDataset:
    if not isinstance(ds, SyntheticDataset) or not ds.is_server:
        raise TypeError("server-side distillation only accepts server-generated synthetic data")
    return ds


@torch.no_grad()
def batched_probs(fn: Callable[[torch.Tensor], torch.Tensor], images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    return torch.cat([fn(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def snapshot_probs(model: ExpandableModel, images: torch.Tensor) -> torch.Tensor:
    return batched_probs(lambda x: torch.softmax(model.view_logits(x, upto(model.num_tasks)), 1), images)


def server_current_loss(state: ServerState, ensemble: EnsembleTeacher, x: torch.Tensor,
                        cfg: DistillConfig = DistillConfig(), targets: torch.Tensor | None = None) -> torch.Tensor:
    """KL between the server's new-class view and the client ensemble."""
    logits = state.model.view_logits(x, new_only(state.task))
    return kl_loss(logits, ensemble.probs(x) if targets is None else targets, cfg)


def server_preserve_loss(state: ServerState, x: torch.Tensor, cfg: DistillConfig = DistillConfig(),
                         targets: torch.Tensor | None = None) -> torch.Tensor:
    """KL between the server's old-class view and its previous-task snapshot."""
    if state.task < 2 or state.snapshot is None:
        raise RuntimeError("preservation loss is undefined at the first task")
    logits = state.model.view_logits(x, old_only(state.task))
    if targets is None:
        with torch.no_grad():
            targets = torch.softmax(state.snapshot.view_logits(x, upto(state.task - 1)), 1)
    return kl_loss(logits, targets, cfg)


@dataclass
class DistillTerm:
    images: torch.Tensor
    targets: torch.Tensor
    view: LogitView


def distill_epochs(model: ExpandableModel, cur: DistillTerm, pre: DistillTerm | None, epochs: int,
                   batch_size: int, lr: float, cfg: DistillConfig, *seed_parts: int,
                   first_epoch: int = 0, on_epoch: Callable[[int], None] | None = None,
                   ) -> list[tuple[float, float | None]]:
    """SGD on KL(cur) [+ KL(pre)]; one epoch is one pass over the current-task set.

    The previous-task set is walked in step with it, restarting when exhausted.
    """
    opt = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=lr)
    model.train()
    history = []
    for e in range(first_epoch, first_epoch + epochs):
        if on_epoch is not None:
            on_epoch(e)
        order = torch.from_numpy(make_rng(*seed_parts, e, 0).permutation(len(cur.targets)))
        pre_order = (torch.from_numpy(make_rng(*seed_parts, e, 1).permutation(len(pre.targets)))
                     if pre is not None else None)
        tot_cur, tot_pre, nb = 0.0, 0.0, 0
        for b, idx in enumerate(order.split(batch_size)):
            loss_cur = kl_loss(model.view_logits(cur.images[idx], cur.view), cur.targets[idx], cfg)
            loss = loss_cur
            if pre is not None:
                n = len(pre_order)
                pidx = pre_order[torch.arange(b * batch_size, b * batch_size + len(idx)) % n]
                loss_pre = kl_loss(model.view_logits(pre.images[pidx], pre.view), pre.targets[pidx], cfg)
                loss = loss + loss_pre
                tot_pre += loss_pre.item()
            check_finite(loss, f"distillation epoch {e}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_cur += loss_cur.item()
            nb += 1
        history.append((tot_cur / max(nb, 1), tot_pre / max(nb, 1) if pre is not None else None))
    return history


def run_server_distill(state: ServerState, ensemble: EnsembleTeacher, epochs: int, batch_size: int,
                       lr: float, seed: int, cfg: DistillConfig = DistillConfig(),
                       comm_round: int = 0, on_epoch: Callable[[int], None] | None = None) -> ServerState:
    """Minimize current-task transfer plus (from task 2) old-task preservation."""
    state.check()
    if epochs == 0:
        return state
    cur, pre = server_targets(state, ensemble)
    hist = distill_epochs(state.model, cur, pre, epochs, batch_size, lr, cfg, seed, state.task, comm_round, 0x5E,
                          on_epoch=on_epoch)
    for e, (lc, lp) in enumerate(hist):
        state.log.append({"task": state.task, "round": comm_round, "epoch": e, "loss_cur": lc, "loss_pre": lp})
    return state


def server_targets(server: ServerState, ensemble: EnsembleTeacher) -> tuple[DistillTerm, DistillTerm | None]:
    """Teacher distributions on the server sets: ensemble for new classes, snapshot for old ones.

    Computed once, before any model moves.
    """
    syn_cur = require_server_set(server.syn_cur)
    cur = DistillTerm(syn_cur.images, batched_probs(ensemble.probs, syn_cur.images), new_only(server.task))
    pre = None
    if server.task > 1 and server.syn_pre is not None and len(server.syn_pre):
        syn_pre = require_server_set(server.syn_pre)
        pre = DistillTerm(syn_pre.images, snapshot_probs(server.snapshot, syn_pre.images), old_only(server.task))
    return cur, pre


def feedback_epoch(client: ClientState, cur: DistillTerm, pre: DistillTerm | None, epoch: int,
                   batch_size: int, lr: float, seed: int, cfg: DistillConfig, comm_round: int = 0) -> ClientState:
    (lc, lp), = distill_epochs(client.model, cur, pre, 1, batch_size, lr, cfg, seed, client.cid, client.task,
                               comm_round, 0xFB, first_epoch=epoch)
    if pre is not None:
        client.old_view_reads += 1
    client.log.append({"task": client.task, "round": comm_round, "epoch": epoch, "phase": "feedback",
                       "loss_cur": lc, "loss_pre": lp})
    return client


def run_feedback(clients: Sequence[ClientState], server: ServerState, ensemble: EnsembleTeacher, epochs: int,
                 batch_size: int, lr: float, seed: int, cfg: DistillConfig = DistillConfig(),
                 comm_round: int = 0, map_fn=map,
                 on_step: Callable[[int, int], None] | None = None) -> list[ClientState]:
    """Distill the ensemble (new classes) and the server snapshot (old classes) into every client.

    The ensemble includes the receiving client itself; its targets are fixed
    before any client is updated. ``on_step(epoch, client_id)`` is called in
    client-id order for each epoch.
    """
    clients = list(clients)
    if epochs == 0:
        return clients
    cur, pre = server_targets(server, ensemble)
    for e in range(epochs):
        if on_step is not None:
            for c in clients:
                on_step(e, c.cid)
        clients = list(map_fn(lambda c: feedback_epoch(c, cur, pre, e, batch_size, lr, seed, cfg, comm_round),
                              clients))
    return clients
