import numpy as np
import pytest
import torch

from conftest import tiny_overrides
from hetfcl import baselines, orchestrator
from hetfcl.config import load_config
from hetfcl.models import build_model, expand_head
from hetfcl.orchestrator import ExperimentError, Runner, run_experiment
from hetfcl.utils import module_hash


def cfg_for(root, **extra):
    return load_config(overrides=tiny_overrides(root, **extra), environ={})


def expected_ours_trace(T, R, K, Qp, Ql, Es, Ef):
    out = []
    for t in range(1, T + 1):
        for q in range(Qp):
            out += [f"prototype t={t} q={q} k={k}" for k in range(K)]
        for r in range(R):
            out += [f"client_update t={t} r={r} k={k} l={l}" for k in range(K) for l in range(Ql)]
            out.append(f"server_synthesis t={t} r={r}")
            out += [f"server_distill t={t} r={r} e={e}" for e in range(Es)]
            for e in range(Ef):
                out += [f"feedback t={t} r={r} e={e} k={k}" for k in range(K)]
        out += [f"snapshot t={t}", f"evaluate t={t}"]
    return out


def test_trace_follows_nested_schedule(glyph_root):
    cfg = cfg_for(glyph_root, **{"schedule.rounds": 2, "schedule.proto_rounds": 2, "schedule.local_rounds": 2,
                                 "schedule.server_epochs": 2, "schedule.feedback_epochs": 1})
    bundle = run_experiment(cfg)
    assert bundle.trace == expected_ours_trace(2, 2, 3, 2, 2, 2, 1)


def test_homogeneous_trace_has_aggregation_and_no_generator(glyph_root):
    cfg = cfg_for(glyph_root, strategy="fedavg", **{"schedule.rounds": 2})
    runner = Runner(cfg)
    runner.run()
    assert runner.backend is None
    want = []
    for t in (1, 2):
        for r in range(2):
            want += [f"client_update t={t} r={r} k={k} l=0" for k in range(3)] + [f"aggregate t={t} r={r}"]
        want += [f"snapshot t={t}", f"evaluate t={t}"]
    assert runner.trace == want


def test_single_task_never_replays(glyph_root):
    cfg = cfg_for(glyph_root, num_tasks=1)
    runner = Runner(cfg)
    runner.run()
    assert all(c.snapshot_reads == 0 and c.old_view_reads == 0 for c in runner.clients)
    assert all(rec["loss_pre"] is None for rec in runner.server.log)
    assert all(rec.get("loss_inter") is None for c in runner.clients for rec in c.log)
    assert runner.server_acc.rows_done == 1


def test_second_task_replays(glyph_root):
    runner = Runner(cfg_for(glyph_root))
    runner.run()
    assert all(c.snapshot_reads > 0 for c in runner.clients)
    assert any(rec["loss_pre"] is not None for rec in runner.server.log)


def test_runs_are_deterministic(glyph_root, tmp_path):
    cfg = cfg_for(glyph_root)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("accuracy_server.txt", "accuracy_client0.txt", "trace.txt", "logs/clients.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_threaded_clients_match_serial(glyph_root):
    a, b = Runner(cfg_for(glyph_root)), Runner(cfg_for(glyph_root, workers=2))
    a.run()
    b.run()
    b.close()
    assert [module_hash(c.model) for c in a.clients] == [module_hash(c.model) for c in b.clients]
    assert module_hash(a.server.model) == module_hash(b.server.model)


def test_strategies_share_partition_and_initial_models(glyph_root):
    runs = {s: Runner(cfg_for(glyph_root, strategy=s)) for s in ("ours", "kd_ft", "kd_lwf")}
    ref = runs["ours"]
    for r in runs.values():
        for k in range(3):
            for t in (1, 2):
                assert np.array_equal(r.partition.indices(k, t), ref.partition.indices(k, t))
            assert module_hash(r.clients[k].model) == module_hash(ref.clients[k].model)


def test_fedavg_server_is_mean_of_clients(glyph_root, monkeypatch):
    runner = Runner(cfg_for(glyph_root, strategy="fedavg"))
    runner.start_task(1)
    runner.baseline_round(1, 0)
    for name, p in runner.server.model.state_dict().items():
        naive = sum(c.model.state_dict()[name] for c in runner.clients) / 3
        torch.testing.assert_close(p, naive, rtol=0, atol=1e-6)
    # next round starts every client from the aggregate
    captured = []
    real = baselines.run_plain_local

    def spy(state, *args, **kw):
        captured.append(module_hash(state.model))
        return real(state, *args, **kw)

    monkeypatch.setattr(baselines, "run_plain_local", spy)
    h = module_hash(runner.server.model)
    runner.baseline_round(1, 1)
    assert captured == [h, h, h]


def test_average_models_exact():
    ms = [build_model("S", (1, 28, 28), 3, seed=s) for s in range(4)]
    target = build_model("S", (1, 28, 28), 3, seed=9)
    baselines.average_models(target, ms)
    for name, p in target.state_dict().items():
        want = ((ms[0].state_dict()[name] + ms[1].state_dict()[name]) + ms[2].state_dict()[name]
                + ms[3].state_dict()[name]) / 4
        assert torch.equal(p, want)
    with pytest.raises(ValueError):
        baselines.average_models(target, [])


def test_ewc_penalty_analytic():
    m = build_model("S", (1, 28, 28), 2, seed=0)
    params = dict(m.named_parameters())
    fisher = {k: torch.full_like(v, 0.5) for k, v in params.items()}
    anchor = {k: v.detach() - 0.1 for k, v in params.items()}
    pen = baselines.EWCPenalty(fisher, anchor, lam=100.0)
    n = sum(v.numel() for v in params.values())
    assert pen(m).item() == pytest.approx(0.5 * 100.0 * 0.5 * 0.01 * n, rel=1e-5)
    pen(m).backward()
    for v in params.values():
        torch.testing.assert_close(v.grad, torch.full_like(v, 100.0 * 0.5 * 0.1))
    expand_head(m, [5, 6])
    assert pen(m).item() == pytest.approx(0.5 * 100.0 * 0.5 * 0.01 * n, rel=1e-5)


def test_ewc_extend_accumulates_and_reanchors():
    a = {"w": torch.tensor([1.0, 2.0])}
    pen = baselines.EWCPenalty(a, {"w": torch.zeros(2)}, 1.0).extend({"w": torch.tensor([0.5, 0.5])},
                                                                      {"w": torch.ones(2)})
    torch.testing.assert_close(pen.fisher["w"], torch.tensor([1.5, 2.5]))
    torch.testing.assert_close(pen.anchor["w"], torch.ones(2))


def test_fisher_matches_per_sample_loop():
    torch.manual_seed(0)
    m = build_model("S", (1, 28, 28), [0, 1, 2], seed=1)
    x, y = torch.rand(12, 1, 28, 28), torch.tensor([0, 1, 2] * 4)
    got = baselines.estimate_fisher(m, x, y, samples=12, seed=0, chunk=5)
    want = {k: torch.zeros_like(v) for k, v in m.named_parameters()}
    for i in range(12):
        m.zero_grad()
        torch.nn.functional.cross_entropy(m(x[i:i + 1]), y[i:i + 1]).backward()
        for k, v in m.named_parameters():
            want[k] += v.grad ** 2 / 12
    for k in want:
        torch.testing.assert_close(got[k], want[k], rtol=1e-4, atol=1e-9)


def test_fisher_subsamples():
    m = build_model("S", (1, 28, 28), [0, 1], seed=1)
    x, y = torch.rand(20, 1, 28, 28), torch.tensor([0, 1] * 10)
    a = baselines.estimate_fisher(m, x, y, samples=5, seed=3)
    b = baselines.estimate_fisher(m, x, y, samples=5, seed=3)
    assert all(torch.equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("strategy", ["fed_ewc", "fedlwf_2t", "kd_ft", "kd_ewc", "kd_lwf"])
def test_every_baseline_runs(glyph_root, strategy):
    bundle = run_experiment(cfg_for(glyph_root, strategy=strategy))
    assert bundle.server.rows_done == 2
    assert bundle.final_forgetting() is not None


def test_server_never_sees_client_pixels(glyph_root, monkeypatch):
    """Tag every real training image, then check what the server trains on."""
    runner = Runner(cfg_for(glyph_root))
    sentinel = np.float32(0.123456)
    runner.stream.train.images[:, 0, 0, 0] = sentinel
    seen = []
    real = orchestrator.run_server_distill

    def spy(state, *args, **kw):
        for ds in (state.syn_cur, state.syn_pre):
            if ds is not None:
                seen.append(ds.images[:, 0, 0, 0].clone())
        return real(state, *args, **kw)

    monkeypatch.setattr(orchestrator, "run_server_distill", spy)
    runner.run()
    assert seen
    assert all(not bool((s == torch.tensor(sentinel)).any()) for s in seen)
    assert all(c.shard.owner == c.cid for c in runner.clients)


def test_failure_leaves_partial_bundle_and_marker(glyph_root, tmp_path, monkeypatch):
    real = orchestrator.Runner.end_task

    def boom(self, t):
        real(self, t)
        if t == 2:
            raise FloatingPointError("synthetic failure")

    monkeypatch.setattr(orchestrator.Runner, "end_task", boom)
    with pytest.raises(ExperimentError, match="task 2"):
        run_experiment(cfg_for(glyph_root), tmp_path / "b")
    assert (tmp_path / "b" / "FAILED").read_text().startswith("ExperimentError")
    assert (tmp_path / "b" / "accuracy_server.txt").is_file()
    assert not (tmp_path / "b" / "timing.json").exists()


def test_bundle_layout(glyph_root, tmp_path):
    run_experiment(cfg_for(glyph_root, save_checkpoints="true"), tmp_path / "b")
    d = tmp_path / "b"
    for name in ("config.cfg", "manifest.json", "accuracy_server.txt", "trace.txt", "timing.json",
                 "logs/server.jsonl", "logs/clients.jsonl", "logs/prototypes.jsonl",
                 "checkpoints/server_t2.ckpt", "checkpoints/client2_t1.ckpt", "prototypes/manifest.json"):
        assert (d / name).is_file(), name
    assert load_config(d / "config.cfg", environ={}) == cfg_for(glyph_root, save_checkpoints="true")
