"""Exit criteria, one test per criterion.

Each test records a PASS/FAIL line (collected in the terminal summary) and
then asserts. The end-to-end criteria 6, 7 and 8 share one set of runs.
"""
import os
import random
import time

import numpy as np
import pytest
import torch

from conftest import make_dataset, record_criterion
from hetfcl.cli import main as cli_main
from hetfcl.config import load_config
from hetfcl.data import build_task_stream, load_dataset, partition_dirichlet, to_tensor
from hetfcl.generator.backends import ToyDDPMBackend
from hetfcl.generator.prototypes import Prototype, init_prototype, train_prototype_round
from hetfcl.generator.schedule import NoiseSchedule, forward_chain, forward_diffuse
from hetfcl.generator.synth import synthesize
from hetfcl.losses import DistillConfig, ce_loss, kl_loss
from hetfcl.metrics import AccuracyMatrix, forgetting
from hetfcl.models import ARCHS, HEAD_KINDS, build_model, expand_head, new_only, old_only, upto
from hetfcl.orchestrator import run_experiment

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


# ---------------------------------------------------------------- 1


def brute_force_forgetting(counts, t):
    """Mean over old tasks of (best earlier accuracy) minus (accuracy after task t)."""
    acc = {key: 100.0 * c / n for key, (c, n) in counts.items()}
    total = 0.0
    for j in range(1, t):
        candidates = [acc[(l, j)] for l in range(j, t)]
        total += max(candidates) - acc[(t, j)]
    return total / (t - 1)


def test_criterion_1_forgetting_oracle():
    rng = random.Random(1)

    def check():
        mismatches = 0
        for _ in range(1000):
            T = rng.randint(2, 6)
            m = AccuracyMatrix("server", T)
            for l in range(1, T + 1):
                for j in range(1, l + 1):
                    n = rng.randint(1, 2000)
                    m.record(l, j, rng.randint(0, n), n)
            for t in range(2, T + 1):
                got, want = forgetting(m, t), brute_force_forgetting(m.cells, t)
                if np.float64(got).tobytes() != np.float64(want).tobytes():
                    mismatches += 1
        return mismatches

    mismatches, secs = timed(check)
    ok = mismatches == 0 and secs < 10
    record_criterion(1, ok, f"{mismatches} mismatches over 1000 matrices, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_partition_soundness():
    def check():
        rng = np.random.default_rng(2)
        base = make_dataset(np.repeat(np.arange(6), 40), shape=(1, 1, 1))
        stream = build_task_stream(base, 2)
        bad = 0
        for _ in range(20):
            gamma = float(10 ** rng.uniform(-1.5, 2))
            seed = int(rng.integers(0, 2**31))
            part = partition_dirichlet(stream, 5, gamma, seed)
            for spec in stream.tasks:
                idx = np.concatenate([part.indices(k, spec.index) for k in range(5)])
                if sorted(idx.tolist()) != sorted(spec.train_indices.tolist()):
                    bad += 1
                if any(part.counts[k][spec.index] != len(part.indices(k, spec.index)) for k in range(5)):
                    bad += 1
        big = make_dataset(np.repeat(np.arange(4), 10_000), shape=(1, 1, 1))
        part = partition_dirichlet(build_task_stream(big, 1), 5, 1000.0, 0)
        labels = big.labels
        worst = 0.0
        for c in range(4):
            for k in range(5):
                share = np.sum(labels[part.indices(k, 1)] == c) / 10_000
                worst = max(worst, abs(share - 0.2))
        return bad, worst

    (bad, worst), secs = timed(check)
    ok = bad == 0 and worst <= 0.05 and secs < 30
    record_criterion(2, ok, f"{bad} inconsistent partitions, max share deviation {100 * worst:.2f} pp, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3


def central_difference(fn, z, step=1e-3):
    g = torch.zeros_like(z)
    flat, gf = z.view(-1), g.view(-1)
    for i in range(flat.numel()):
        v = flat[i].item()
        flat[i] = v + step
        up = fn(z).item()
        flat[i] = v - step
        down = fn(z).item()
        flat[i] = v
        gf[i] = (up - down) / (2 * step)
    return g


def test_criterion_3_loss_gradients():
    rng = random.Random(3)
    torch.manual_seed(3)

    def check():
        worst = 0.0
        views_seen = set()
        for i in range(100):
            sizes = [rng.randint(1, 5) for _ in range(rng.randint(2, 3))]
            classes, start = [], 0
            for s in sizes:
                classes.append(list(range(start, start + s)))
                start += s
            model = build_model("S", (1, 28, 28), classes[0], seed=i).double()
            for block in classes[1:]:
                expand_head(model, block)
            model.double()
            t = model.num_tasks
            view = [old_only(t), new_only(t), upto(t)][i % 3]
            views_seen.add(view.kind)
            x = torch.rand(rng.randint(1, 6), 1, 28, 28, dtype=torch.float64)
            z = model.view_logits(x, view).detach().clone()
            c = z.shape[1]
            labels = torch.tensor([rng.randrange(c) for _ in range(len(z))])
            teacher = torch.softmax(torch.randn(len(z), c, dtype=torch.float64) * 2, 1)
            tau = rng.choice([1.0, 2.0, 4.0])
            for fn in (lambda q: ce_loss(q, labels), lambda q: kl_loss(q, teacher, DistillConfig(tau))):
                zz = z.clone().requires_grad_(True)
                (auto,) = torch.autograd.grad(fn(zz), zz)
                num = central_difference(fn, z.clone())
                err = ((auto - num).abs().max() / num.abs().max().clamp_min(1e-12)).item()
                worst = max(worst, err)
        return worst, views_seen

    (worst, views), secs = timed(check)
    ok = worst <= 1e-4 and views == {"old_only", "new_only", "upto"} and secs < 60
    record_criterion(3, ok, f"max relative error {worst:.2e} over 100 shapes, views {sorted(views)}, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4


def test_criterion_4_expansion_retention():
    rng = random.Random(4)

    def check():
        unequal = 0
        for i in range(50):
            arch = rng.choice(ARCHS)
            model = build_model(arch, (1, 28, 28), rng.randint(1, 10), seed=i, head=rng.choice(HEAD_KINDS))
            for _ in range(rng.randint(0, 2)):
                n = len(model.classes)
                expand_head(model, range(n, n + rng.randint(1, 5)))
            x = torch.rand(rng.randint(1, 8), 1, 28, 28)
            t = model.num_tasks
            model.eval()
            before = model.view_logits(x, upto(t)).detach().clone()
            n = len(model.classes)
            expand_head(model, range(n, n + rng.randint(1, 5)))
            after = model.view_logits(x, old_only(t + 1)).detach()
            unequal += not torch.equal(before, after)
        return unequal

    unequal, secs = timed(check)
    ok = unequal == 0 and secs < 30
    record_criterion(4, ok, f"{unequal}/50 models changed old logits, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_5_forward_marginal():
    def check():
        s = NoiseSchedule.linear(10)
        n, steps = 10_000, 10
        g = torch.Generator().manual_seed(5)
        x0 = torch.rand(64, generator=g, dtype=torch.float64) * 2 - 1
        chain = forward_chain(x0.expand(n, -1), steps,
                              torch.randn(steps, n, 64, generator=g, dtype=torch.float64), s)
        closed = forward_diffuse(x0.expand(n, -1), steps, torch.randn(n, 64, generator=g, dtype=torch.float64), s)
        ab = float(s.bar(steps))
        # two independent samples: SE of the difference of means and of variances
        se_mean = np.sqrt(2 * (1 - ab) / n)
        se_var = (1 - ab) * np.sqrt(2 * 2.0 / (n - 1))
        mean_ok = ((chain.mean(0) - closed.mean(0)).abs() <= 3 * se_mean).all().item()
        var_ok = ((chain.var(0) - closed.var(0)).abs() <= 3 * se_var).all().item()
        return mean_ok, var_ok

    (mean_ok, var_ok), secs = timed(check)
    ok = mean_ok and var_ok and secs < 60
    record_criterion(5, ok, f"64 pixels, means within 3 SE {mean_ok}, variances within 3 SE {var_ok}, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- 6, 7, 8


def e2e_config(root, strategy, seed, **extra):
    sets = {"dataset": "mnist", "data_root": str(root), "strategy": strategy, "seed": str(seed),
            "save_checkpoints": "false"}
    sets.update({k: str(v) for k, v in extra.items()})
    return load_config(overrides=sets, environ={})


@pytest.fixture(scope="module")
def e2e(mnist_root, tmp_path_factory):
    """Lazily run (and remember) end-to-end experiments on the criterion-7 setup."""
    out = tmp_path_factory.mktemp("e2e")
    cache = {}

    def get(strategy, seed, tag="", **extra):
        key = (strategy, seed, tag)
        if key not in cache:
            cfg = e2e_config(mnist_root, strategy, seed, **extra)
            bundle, secs = timed(lambda: run_experiment(cfg, out / f"{strategy}{tag}_seed{seed}"))
            cache[key] = (bundle, secs)
        return cache[key]

    return get


def test_criterion_7_directional_end_to_end(e2e):
    ours = [e2e("ours", s) for s in SEEDS]
    base = [e2e("kd_ft", s) for s in SEEDS]
    secs = sum(t for _, t in ours + base)
    acc_o = np.mean([b.final_accuracy() for b, _ in ours])
    acc_b = np.mean([b.final_accuracy() for b, _ in base])
    f_o = np.mean([b.final_forgetting() for b, _ in ours])
    f_b = np.mean([b.final_forgetting() for b, _ in base])
    ok = acc_o - acc_b >= 10 and f_o <= f_b - 20 and secs <= 15 * 60
    record_criterion(7, ok, f"ours acc {acc_o:.2f} F {f_o:.2f} vs kd_ft acc {acc_b:.2f} F {f_b:.2f}, "
                            f"{secs / 60:.1f} min on {os.cpu_count()} cpu")
    assert ok


def test_criterion_6_determinism(e2e):
    first, secs_a = e2e("ours", 0)
    second, secs_b = e2e("ours", 0, tag="_rerun")
    names = sorted(p.name for p in first.directory.glob("accuracy_*.txt"))
    same = names and all((first.directory / n).read_bytes() == (second.directory / n).read_bytes() for n in names)
    secs = secs_a + secs_b
    # criterion 7's budget is 15 min for six runs; two runs of it must fit in twice that
    ok = bool(same) and len(names) == 6 and secs <= 2 * 15 * 60
    record_criterion(6, ok, f"{len(names)} accuracy files byte-identical: {bool(same)}, {secs / 60:.1f} min")
    assert ok


def test_criterion_8_replay_ablation(e2e):
    wins, deltas, secs = 0, [], 0.0
    for s in SEEDS:
        (with_replay, _), (without, t) = e2e("ours", s), e2e("ours", s, tag="_noreplay", use_replay="false")
        secs += t
        d = without.final_forgetting() - with_replay.final_forgetting()
        deltas.append(d)
        wins += d > 0
    ok = wins >= 2 and secs <= 30 * 60
    record_criterion(8, ok, f"F(no replay) - F(replay) per seed {[round(d, 2) for d in deltas]}, "
                            f"{wins}/3 positive, {secs / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- 9


def train_s_classifier(images, labels, seed=9, epochs=4):
    model = build_model("S", (1, 28, 28), range(10), seed=seed)
    opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9)
    g = torch.Generator().manual_seed(seed)
    x, y = to_tensor(images), torch.from_numpy(labels)
    model.train()
    for _ in range(epochs):
        for idx in torch.randperm(len(y), generator=g).split(64):
            opt.zero_grad()
            ce_loss(model(x[idx]), y[idx]).backward()
            opt.step()
    return model.eval()


FIXTURE_CLASSES = (3, 7)
SAMPLES_PER_PROTOTYPE = 5


def test_criterion_9_toy_ddpm_fixture(mnist_root, tmp_path, capsys):
    start = time.perf_counter()
    code = cli_main(["--seed", "0", "--out", str(tmp_path), "train-fixture", "--dataset", "mnist",
                     "--epochs", "10", "--data-root", str(mnist_root)])
    capsys.readouterr()
    assert code == 0
    backend = ToyDDPMBackend.load(next(tmp_path.glob("toy_ddpm_mnist_e10_s0.ckpt")))
    train, test = load_dataset(mnist_root, "mnist")
    x = to_tensor(train.images)
    y = torch.from_numpy(train.labels)
    sched = load_config(environ={}).schedule
    steps = sched.proto_rounds * sched.proto_steps
    descended, prototypes = 0, []
    for seed in range(10):
        ok_seed = True
        for c in FIXTURE_CLASSES:
            losses = []
            start_vec = init_prototype(c, backend.cond_dim, seed, 1, backend.init_std).vector
            p = train_prototype_round(backend, c, x[y == c], start_vec, steps, sched.proto_lr, seed,
                                      sched.proto_batch, losses=losses)
            k = steps // 5
            ok_seed &= np.mean(losses[-k:]) < np.mean(losses[:k])
            prototypes.append((c, p))
        descended += ok_seed
    agree, total = 0, 0
    clf = train_s_classifier(train.images, train.labels)
    held_out_acc = (clf(to_tensor(test.images)).argmax(1).numpy() == test.labels).mean()
    for i, (c, p) in enumerate(prototypes):
        ds = synthesize(backend, [Prototype(c, p, 1)], SAMPLES_PER_PROTOTYPE, seed=i, provenance="client_current")
        with torch.no_grad():
            agree += int((clf(ds.images).argmax(1) == ds.labels).sum())
        total += len(ds)
    rate = agree / total
    secs = time.perf_counter() - start
    ok = descended >= 9 and rate >= 0.6 and secs <= 45 * 60
    record_criterion(9, ok, f"loss fell on {descended}/10 seeds, classifier agreement {100 * rate:.1f}% "
                            f"on {total} samples (classifier test acc {100 * held_out_acc:.1f}%), {secs / 60:.1f} min")
    assert ok
