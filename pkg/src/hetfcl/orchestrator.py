"""End-to-end driver: tasks, communication rounds, baselines, evaluation and the results bundle."""
from __future__ import annotations

import json
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import baselines
from .client import ClientState, run_local_round
from .config import ExperimentConfig, to_ini
from .data import ClientPartition, TaskStream, build_task_stream, client_shard, load_dataset, partition_dirichlet, to_tensor
from .generator import (
    GeneratorBackend,
    MockBackend,
    Prototype,
    ToyDDPMBackend,
    federated_prototype_update,
    per_class_count,
    save_prototypes,
    synthesize,
)
from .generator.synth import SyntheticDataset, synthesis_seed
from .losses import DistillConfig, EnsembleTeacher
from .metrics import AccuracyMatrix, cumulative_accuracy, forgetting
from .models import ExpandableModel, build_model, expand_head, new_only, save_model, snapshot, upto
from .server import DistillTerm, ServerState, batched_probs, distill_epochs, run_feedback, run_server_distill
from .utils import derive_seed

# seed tags for synthetic sets
TAG_CLIENT_CUR, TAG_CLIENT_PRE, TAG_SERVER_CUR, TAG_SERVER_PRE = 1, 2, 3, 4


class ExperimentError(RuntimeError):
    """Failure inside a run, annotated with where it happened."""


@dataclass
class ResultsBundle:
    directory: Path | None
    config: ExperimentConfig
    server: AccuracyMatrix
    clients: dict[int, AccuracyMatrix]
    trace: list[str]
    round_evals: list[dict] = field(default_factory=list)

    def final_accuracy(self) -> float:
        return cumulative_accuracy(self.server, self.config.num_tasks)

    def final_forgetting(self) -> float | None:
        return forgetting(self.server, self.config.num_tasks)


@torch.no_grad()
def evaluate(model: ExpandableModel, stream: TaskStream, t: int, batch_size: int = 500) -> dict[int, tuple[int, int]]:
    """(correct, total) on each test split j <= t, predicting over every class seen so far."""
    if stream.test is None:
        raise ValueError("task stream has no test split")
    model.eval()
    classes = torch.tensor(model.view_classes(upto(t)))
    out = {}
    for j in range(1, t + 1):
        idx = stream.task(j).test_indices
        images, labels = stream.test.images[idx], torch.from_numpy(stream.test.labels[idx].astype(np.int64))
        correct = 0
        for s in range(0, len(idx), batch_size):
            logits = model.view_logits(to_tensor(images[s:s + batch_size]), upto(t))
            correct += int((classes[logits.argmax(1)] == labels[s:s + batch_size]).sum())
        out[j] = (correct, len(idx))
    model.train()
    return out


def load_backend(cfg: ExperimentConfig, stream: TaskStream) -> GeneratorBackend:
    if cfg.backend == "mock":
        return MockBackend.fit(stream.train.images, stream.train.labels, dim=cfg.mock_dim)
    return ToyDDPMBackend.load(cfg.backend_path, guidance=cfg.guidance)


class Runner:
    """Holds the shared state of one experiment and executes it task by task."""

    def __init__(self, cfg: ExperimentConfig, stream: TaskStream | None = None,
                 partition: ClientPartition | None = None, backend: GeneratorBackend | None = None,
                 log: Callable[[str], None] | None = None):
        self.cfg = cfg
        if stream is None:
            train, test = load_dataset(cfg.data_root, cfg.dataset)
            stream = build_task_stream(train, cfg.num_tasks, cfg.seed, test=test,
                                       shuffle_classes=cfg.shuffle_classes)
        self.stream = stream
        self.partition = partition or partition_dirichlet(stream, cfg.num_clients, cfg.gamma, cfg.seed)
        self.needs_generator = not cfg.homogeneous
        self.backend = backend if backend is not None or not self.needs_generator else load_backend(cfg, stream)
        self.distill = DistillConfig(cfg.temperature)
        self.trace: list[str] = []
        self.log = log or (lambda msg: None)
        self.prototypes: dict[int, Prototype] = {}
        self.proto_history: list[dict] = []
        self.round_evals: list[dict] = []
        self.ewc: dict[int, baselines.EWCPenalty] = {}
        self.prev_global: ExpandableModel | None = None
        shape = stream.train.image_shape
        input_shape = (shape[2], shape[0], shape[1])
        first = stream.task(1).classes
        self.clients = [ClientState(k, build_model(a, input_shape, first, derive_seed(cfg.seed, 0xC1, k), cfg.head))
                        for k, a in enumerate(cfg.client_archs())]
        self.server = ServerState(build_model(cfg.global_arch(), input_shape, first, derive_seed(cfg.seed, 0x5E), cfg.head))
        if not cfg.server_train_extractor:
            for p in self.server.model.extractor.parameters():
                p.requires_grad_(False)
        self.server_acc = AccuracyMatrix("server", cfg.num_tasks)
        self.client_acc = {c.cid: AccuracyMatrix(f"client{c.cid}", cfg.num_tasks) for c in self.clients}
        self.pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    # -- helpers -----------------------------------------------------------

    def map_clients(self, fn, clients):
        """Apply ``fn`` to every client; results come back in client-id order."""
        if self.pool is None:
            return [fn(c) for c in clients]
        return list(self.pool.map(fn, clients))

    def tag(self, *parts) -> None:
        self.trace.append(" ".join(str(p) for p in parts))

    def synth(self, classes, total: int, seed: int, provenance: str) -> SyntheticDataset:
        protos = [self.prototypes[c] for c in classes]
        return synthesize(self.backend, protos, per_class_count(total, len(protos)), seed, provenance)

    # -- phases ------------------------------------------------------------

    def start_task(self, t: int) -> None:
        new = self.stream.task(t).classes
        if t > 1:
            for c in self.clients:
                expand_head(c.model, new)
            expand_head(self.server.model, new)
        for c in self.clients:
            c.task = t
            c.shard = client_shard(self.partition, c.cid, t)
            c.syn_cur = c.syn_pre = None
        self.server.task = t

    def prototype_update(self, t: int) -> None:
        s = self.cfg.schedule
        data = {c.cid: (to_tensor(c.shard.images), torch.from_numpy(c.shard.labels.astype(np.int64)))
                for c in self.clients}

        def on_round(q):
            for c in self.clients:
                self.tag("prototype", f"t={t}", f"q={q}", f"k={c.cid}")

        protos, hist = federated_prototype_update(
            self.backend, self.stream.task(t).classes, data, s.proto_rounds, s.proto_steps, s.proto_lr,
            self.cfg.seed, version=t, batch_size=s.proto_batch, on_round=on_round)
        self.prototypes.update(protos)
        for c, losses in hist.items():
            self.proto_history.append({"task": t, "class": c, "losses": losses})

    def client_update(self, t: int, r: int) -> None:
        cfg, s = self.cfg, self.cfg.schedule
        new, old = self.stream.task(t).classes, self.stream.classes_before(t)
        for c in self.clients:
            for q in range(s.local_rounds):
                self.tag("client_update", f"t={t}", f"r={r}", f"k={c.cid}", f"l={q}")

        def work(c: ClientState) -> ClientState:
            c.syn_cur = self.synth(new, cfg.synthetic.client_cur,
                                   synthesis_seed(cfg.seed, t, r, TAG_CLIENT_CUR * 100 + c.cid), "client_current")
            c.syn_pre = (self.synth(old, cfg.synthetic.client_pre,
                                    synthesis_seed(cfg.seed, t, r, TAG_CLIENT_PRE * 100 + c.cid), "client_replay")
                         if old else None)
            return run_local_round(c, s.local_rounds, s.local_steps, s.batch_size, s.lr, cfg.seed, self.distill,
                                   use_replay=cfg.use_replay, use_syn_cur=cfg.use_syn_cur, comm_round=r)

        self.clients = self.map_clients(work, self.clients)

    def server_synthesis(self, t: int, r: int) -> None:
        cfg = self.cfg
        self.tag("server_synthesis", f"t={t}", f"r={r}")
        rr = 0 if cfg.reuse_server_syn else r
        if cfg.reuse_server_syn and r > 0 and self.server.syn_cur is not None:
            return
        new, old = self.stream.task(t).classes, self.stream.classes_before(t)
        self.server.syn_cur = self.synth(new, cfg.synthetic.server_cur,
                                         synthesis_seed(cfg.seed, t, rr, TAG_SERVER_CUR), "server_current")
        self.server.syn_pre = (self.synth(old, cfg.synthetic.server_pre,
                                          synthesis_seed(cfg.seed, t, rr, TAG_SERVER_PRE), "server_replay")
                               if old else None)

    def ensemble(self, view_fn) -> EnsembleTeacher:
        members = [(c.model, view_fn(c.task)) for c in sorted(self.clients, key=lambda c: c.cid)]
        return EnsembleTeacher(members, self.cfg.ensemble)

    def ours_round(self, t: int, r: int) -> None:
        s = self.cfg.schedule
        self.client_update(t, r)
        self.server_synthesis(t, r)
        ens = self.ensemble(new_only)
        run_server_distill(self.server, ens, s.server_epochs, s.batch_size, s.lr, self.cfg.seed, self.distill,
                           comm_round=r, on_epoch=lambda e: self.tag("server_distill", f"t={t}", f"r={r}", f"e={e}"))
        self.clients = run_feedback(
            self.clients, self.server, ens, s.feedback_epochs, s.batch_size, s.lr, self.cfg.seed, self.distill,
            comm_round=r, map_fn=self.map_clients,
            on_step=lambda e, k: self.tag("feedback", f"t={t}", f"r={r}", f"e={e}", f"k={k}"))

    def regularizer(self, c: ClientState, t: int):
        st = self.cfg.strategy
        if t < 2 or st in ("fedavg", "kd_ft"):
            return None
        if st in ("fed_ewc", "kd_ewc"):
            return self.ewc[c.cid]
        teacher = self.prev_global if st == "fedlwf_2t" else c.snapshot
        return baselines.lwf_regularizer(teacher, t, self.distill)

    def baseline_round(self, t: int, r: int) -> None:
        run_baseline_round(self, t, r)

    def end_task(self, t: int) -> None:
        cfg = self.cfg
        self.tag("snapshot", f"t={t}")
        for c in self.clients:
            c.snapshot = snapshot(c.model)
        self.server.snapshot = snapshot(self.server.model)
        if cfg.homogeneous:
            self.prev_global = self.server.snapshot
        if cfg.strategy in ("fed_ewc", "kd_ewc"):
            for c in self.clients:
                # homogeneous: anchor and Fisher at the shared global weights
                model = self.server.model if cfg.homogeneous else c.model
                self.ewc[c.cid] = baselines.ewc_penalty(
                    model, to_tensor(c.shard.images), torch.from_numpy(c.shard.labels.astype(np.int64)),
                    cfg.ewc.lam, cfg.ewc.fisher_samples, cfg.seed * 7919 + c.cid * 31 + t, self.ewc.get(c.cid))
        self.tag("evaluate", f"t={t}")
        for j, (correct, total) in evaluate(self.server.model, self.stream, t).items():
            self.server_acc.record(t, j, correct, total)
        if cfg.eval_clients:
            for c in self.clients:
                for j, (correct, total) in evaluate(c.model, self.stream, t).items():
                    self.client_acc[c.cid].record(t, j, correct, total)
        self.log(f"task {t}: server cumulative accuracy {cumulative_accuracy(self.server_acc, t):.2f}")

    def run(self, on_task_end: Callable[[int], None] | None = None) -> None:
        cfg = self.cfg
        for t in range(1, cfg.num_tasks + 1):
            phase = "setup"
            try:
                self.start_task(t)
                if self.needs_generator:
                    phase = "prototype update"
                    self.prototype_update(t)
                for r in range(cfg.schedule.rounds):
                    phase = f"round {r}"
                    if cfg.strategy == "ours":
                        self.ours_round(t, r)
                    else:
                        self.baseline_round(t, r)
                    if cfg.eval_every_round:
                        ev = evaluate(self.server.model, self.stream, t)
                        self.round_evals.append({"task": t, "round": r,
                                                 "correct": sum(v[0] for v in ev.values()),
                                                 "total": sum(v[1] for v in ev.values())})
                phase = "end of task"
                self.end_task(t)
            except ExperimentError:
                raise
            except Exception as e:
                raise ExperimentError(f"task {t}, {phase}: {type(e).__name__}: {e}") from e
            if on_task_end is not None:
                on_task_end(t)

    def close(self) -> None:
        if self.pool is not None:
            self.pool.shutdown()


def run_baseline_round(runner: Runner, t: int, r: int) -> None:
    """One communication round of a comparison strategy."""
    cfg, s = runner.cfg, runner.cfg.schedule
    st = cfg.strategy
    if st == "ours":
        raise ValueError("run_baseline_round does not handle strategy 'ours'")
    if st not in ("fedavg", "fed_ewc", "fedlwf_2t", "kd_ft", "kd_ewc", "kd_lwf"):
        raise ValueError(f"unknown strategy {st!r}")
    if cfg.homogeneous:
        state = runner.server.model.state_dict()
        for c in runner.clients:
            c.model.load_state_dict(state)
    for c in runner.clients:
        for q in range(s.local_rounds):
            runner.tag("client_update", f"t={t}", f"r={r}", f"k={c.cid}", f"l={q}")

    def work(c: ClientState) -> ClientState:
        return baselines.run_plain_local(c, s.local_rounds, s.local_steps, s.batch_size, s.lr, cfg.seed,
                                         runner.regularizer(c, t), comm_round=r)

    runner.clients = runner.map_clients(work, runner.clients)
    if cfg.homogeneous:
        runner.tag("aggregate", f"t={t}", f"r={r}")
        baselines.average_models(runner.server.model, [c.model for c in runner.clients])
        return
    # KD transport over every class seen so far, on the server's current-task synthetic set only
    runner.tag("server_synthesis", f"t={t}", f"r={r}")
    rr = 0 if cfg.reuse_server_syn else r
    if not (cfg.reuse_server_syn and r > 0 and runner.server.syn_cur is not None):
        runner.server.syn_cur = runner.synth(runner.stream.task(t).classes, cfg.synthetic.server_cur,
                                             synthesis_seed(cfg.seed, t, rr, TAG_SERVER_CUR), "server_current")
    ens = runner.ensemble(upto)
    cur = DistillTerm(runner.server.syn_cur.images, batched_probs(ens.probs, runner.server.syn_cur.images), upto(t))
    hist = distill_epochs(runner.server.model, cur, None, s.server_epochs, s.batch_size, s.lr, runner.distill,
                          cfg.seed, t, r, 0x5E,
                          on_epoch=lambda e: runner.tag("server_distill", f"t={t}", f"r={r}", f"e={e}"))
    for e, (lc, _) in enumerate(hist):
        runner.server.log.append({"task": t, "round": r, "epoch": e, "loss_cur": lc, "loss_pre": None})
    for e in range(s.feedback_epochs):
        for c in runner.clients:
            runner.tag("feedback", f"t={t}", f"r={r}", f"e={e}", f"k={c.cid}")

        def fb(c: ClientState, e=e) -> ClientState:
            (lc, _), = distill_epochs(c.model, cur, None, 1, s.batch_size, s.lr, runner.distill,
                                      cfg.seed, c.cid, t, r, 0xFB, first_epoch=e)
            c.log.append({"task": t, "round": r, "epoch": e, "phase": "feedback", "loss_cur": lc, "loss_pre": None})
            return c

        runner.clients = runner.map_clients(fb, runner.clients)


# ---------------------------------------------------------------------------
# bundle output


def _jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_partial(runner: Runner, out: Path) -> None:
    """Accuracy matrices and logs as they stand; called after every task."""
    runner.server_acc.write(out / "accuracy_server.txt")
    for k, m in runner.client_acc.items():
        if m.cells:
            m.write(out / f"accuracy_client{k}.txt")
    logs = out / "logs"
    logs.mkdir(exist_ok=True)
    _jsonl(logs / "server.jsonl", runner.server.log)
    _jsonl(logs / "clients.jsonl", ({"client": c.cid, **rec} for c in runner.clients for rec in c.log))
    _jsonl(logs / "prototypes.jsonl", runner.proto_history)
    _jsonl(logs / "rounds.jsonl", runner.round_evals)
    (out / "trace.txt").write_text("\n".join(runner.trace) + "\n")


def write_task_outputs(runner: Runner, out: Path, t: int) -> None:
    write_partial(runner, out)
    if runner.cfg.save_checkpoints:
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        save_model(ck / f"server_t{t}.ckpt", runner.server.model, {"task": t})
        for c in runner.clients:
            save_model(ck / f"client{c.cid}_t{t}.ckpt", c.model, {"task": t, "client": c.cid})
    if runner.prototypes:
        save_prototypes(out / "prototypes", list(runner.prototypes.values()))


def manifest(cfg: ExperimentConfig) -> dict:
    return {"strategy": cfg.strategy, "seed": cfg.seed, "dataset": cfg.dataset, "num_tasks": cfg.num_tasks,
            "num_clients": cfg.num_clients, "gamma": cfg.gamma, "backend": cfg.backend,
            "python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__,
            "torch_threads": torch.get_num_threads()}


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, stream: TaskStream | None = None,
                   partition: ClientPartition | None = None, backend: GeneratorBackend | None = None,
                   log: Callable[[str], None] | None = None) -> ResultsBundle:
    """Run every task of ``cfg``; with ``out`` set, write the results bundle there.

    On failure the partial bundle is kept and a FAILED marker records the error.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    directory = Path(out) if out is not None else None
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "FAILED").unlink(missing_ok=True)
        (directory / "config.cfg").write_text(to_ini(cfg))
        (directory / "manifest.json").write_text(json.dumps(manifest(cfg), indent=1, sort_keys=True))
    runner = None
    started = time.time()
    try:
        runner = Runner(cfg, stream, partition, backend, log)
        hook = (lambda t: write_task_outputs(runner, directory, t)) if directory is not None else None
        runner.run(hook)
    except Exception as e:
        if directory is not None:
            if runner is not None:
                write_partial(runner, directory)
            (directory / "FAILED").write_text(f"{type(e).__name__}: {e}\n")
        raise
    finally:
        if runner is not None:
            runner.close()
    if directory is not None:
        (directory / "timing.json").write_text(json.dumps({"seconds": round(time.time() - started, 1)}))
    return ResultsBundle(directory, cfg, runner.server_acc, runner.client_acc, runner.trace, runner.round_evals)
