"""Accuracy matrix, cumulative accuracy, forgetting, and report rendering."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

HEADER = "l\tj\tcorrect\ttotal\tpercent"


class IncompatibleBundlesError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """acc[l][j]: accuracy after task l on task j's test set, stored as raw counts."""

    scope: str
    num_tasks: int
    cells: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)

    def record(self, l: int, j: int, correct: int, total: int) -> None:
        if not 1 <= j <= l <= self.num_tasks:
            raise ValueError(f"cell ({l}, {j}) outside the lower triangle of a {self.num_tasks}-task matrix")
        if total <= 0 or not 0 <= correct <= total:
            raise ValueError(f"invalid counts {correct}/{total}")
        self.cells[(l, j)] = (int(correct), int(total))

    def acc(self, l: int, j: int) -> float:
        correct, total = self.cells[(l, j)]
        return 100.0 * correct / total

    def has_row(self, l: int) -> bool:
        return all((l, j) in self.cells for j in range(1, l + 1))

    @property
    def rows_done(self) -> int:
        n = 0
        while n < self.num_tasks and self.has_row(n + 1):
            n += 1
        return n

    @classmethod
    def from_percent(cls, rows: Sequence[Sequence[float | None]], scope: str = "server",
                     total: int = 10_000) -> "AccuracyMatrix":
        """Build from percent values (row l, column j); counts use a fixed denominator."""
        m = cls(scope, len(rows))
        for l, row in enumerate(rows, 1):
            for j in range(1, l + 1):
                if row[j - 1] is not None:
                    m.record(l, j, round(row[j - 1] * total / 100.0), total)
        return m

    def to_text(self) -> str:
        lines = [f"# scope={self.scope} T={self.num_tasks}", HEADER]
        for (l, j) in sorted(self.cells):
            c, n = self.cells[(l, j)]
            lines.append(f"{l}\t{j}\t{c}\t{n}\t{100.0 * c / n:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path) -> "AccuracyMatrix":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# "):
            raise ValueError(f"{path}: missing accuracy-matrix header")
        meta = dict(kv.split("=", 1) for kv in lines[0][2:].split())
        m = cls(meta["scope"], int(meta["T"]))
        if lines[1] != HEADER:
            raise ValueError(f"{path}: unexpected column header")
        for line in lines[2:]:
            if line.strip():
                l, j, c, n, _ = line.split("\t")
                m.record(int(l), int(j), int(c), int(n))
        return m


def cumulative_accuracy(m: AccuracyMatrix, t: int) -> float:
    """Pooled accuracy over the union of test sets of tasks 1..t after task t."""
    if not m.has_row(t):
        raise KeyError(f"row {t} of the {m.scope} accuracy matrix is not populated")
    correct = sum(m.cells[(t, j)][0] for j in range(1, t + 1))
    total = sum(m.cells[(t, j)][1] for j in range(1, t + 1))
    return 100.0 * correct / total


def forgetting(m: AccuracyMatrix, t: int) -> float | None:
    """Mean drop from each old task's best earlier accuracy to its accuracy after task t.

    Undefined (None) at t=1.
    """
    if t < 2:
        return None
    for l in range(1, t + 1):
        if not m.has_row(l):
            raise KeyError(f"row {l} of the {m.scope} accuracy matrix is not populated")
    total = 0.0
    for j in range(1, t):
        best = m.acc(j, j)
        for l in range(j + 1, t):
            a = m.acc(l, j)
            if a > best:
                best = a
        total += best - m.acc(t, j)
    return total / (t - 1)


# ---------------------------------------------------------------------------
# reports


@dataclass
class BundleSummary:
    name: str
    strategy: str
    seed: int | None
    num_tasks: int
    server: AccuracyMatrix
    clients: dict[int, AccuracyMatrix]


def load_bundle(directory: str | Path) -> BundleSummary:
    d = Path(directory)
    path = d / "accuracy_server.txt"
    if not path.is_file():
        raise FileNotFoundError(f"{d} is not a results bundle (no accuracy_server.txt)")
    server = AccuracyMatrix.read(path)
    clients = {}
    for p in sorted(d.glob("accuracy_client*.txt")):
        clients[int(p.stem[len("accuracy_client"):])] = AccuracyMatrix.read(p)
    manifest = json.loads((d / "manifest.json").read_text()) if (d / "manifest.json").is_file() else {}
    return BundleSummary(d.name, manifest.get("strategy", d.name), manifest.get("seed"), server.num_tasks,
                         server, clients)


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.2f}"


def mean_std(values: Sequence[float]) -> str:
    if not values:
        return "-"
    a = np.asarray(values, dtype=np.float64)
    return f"{a.mean():.2f} ± {a.std():.2f}"


def _safe(fn, *args):
    try:
        return fn(*args)
    except KeyError:
        return None


def _mean(vals: list[float | None]) -> float | None:
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def table_rows(bundles: Sequence[BundleSummary]) -> tuple[list[str], list[list[str]]]:
    """Per-strategy row of cumulative accuracy after each task and final forgetting, averaged over bundles."""
    T = bundles[0].num_tasks
    header = ["strategy", "runs"] + [f"-t{t}" for t in range(1, T + 1)] + ["F"]
    groups: dict[str, list[BundleSummary]] = {}
    for b in bundles:
        groups.setdefault(b.strategy, []).append(b)
    rows = []
    for strategy, group in groups.items():
        cells = [_mean([_safe(cumulative_accuracy, b.server, t) for b in group]) for t in range(1, T + 1)]
        f = _mean([_safe(forgetting, b.server, T) for b in group]) if T > 1 else None
        rows.append([strategy, str(len(group))] + [_fmt(c) for c in cells] + [_fmt(f)])
    return header, rows


def format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + rows]
    return "\n".join(lines) + "\n"


def client_summary(bundles: Sequence[BundleSummary]) -> str:
    """Final cumulative client accuracy per strategy as mean ± std across clients (and seeds)."""
    T = bundles[0].num_tasks
    groups: dict[str, list[float]] = {}
    for b in bundles:
        vals = groups.setdefault(b.strategy, [])
        for k in sorted(b.clients):
            v = _safe(cumulative_accuracy, b.clients[k], T)
            if v is not None:
                vals.append(v)
    lines = ["strategy\tclient_acc"]
    lines += [f"{s}\t{mean_std(v)}" for s, v in groups.items()]
    return "\n".join(lines) + "\n"


def per_task_chart(bundles: Sequence[BundleSummary], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    T = bundles[0].num_tasks
    groups: dict[str, list[BundleSummary]] = {}
    for b in bundles:
        groups.setdefault(b.strategy, []).append(b)
    labels = [f"task {j}" for j in range(1, T + 1)] + ["avg"]
    fig, ax = plt.subplots(figsize=(1.2 * (T + 1) * max(1, len(groups)) + 2, 3.5))
    width = 0.8 / max(1, len(groups))
    for i, (strategy, group) in enumerate(groups.items()):
        vals = [_mean([b.server.acc(T, j) if (T, j) in b.server.cells else None for b in group])
                for j in range(1, T + 1)]
        vals.append(_mean([_safe(cumulative_accuracy, b.server, T) for b in group]))
        xs = np.arange(T + 1) + i * width
        ax.bar(xs, [v if v is not None else 0.0 for v in vals], width, label=strategy)
    ax.set_xticks(np.arange(T + 1) + width * (len(groups) - 1) / 2)
    ax.set_xticklabels(labels)
    ax.set_ylabel("server accuracy after final task (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def render_report(bundle_dirs: Sequence[str | Path], out: str | Path) -> dict[str, Path]:
    """Write table.txt, clients.txt and per_task.png comparing the given bundles."""
    if not bundle_dirs:
        raise ValueError("report needs at least one bundle")
    bundles = [load_bundle(d) for d in bundle_dirs]
    sizes = {b.num_tasks for b in bundles}
    if len(sizes) != 1:
        raise IncompatibleBundlesError(f"bundles disagree on the number of tasks: {sorted(sizes)}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    header, rows = table_rows(bundles)
    paths = {"table": out / "table.txt", "clients": out / "clients.txt", "chart": out / "per_task.png"}
    paths["table"].write_text(format_table(header, rows))
    paths["clients"].write_text(client_summary(bundles))
    per_task_chart(bundles, paths["chart"])
    return paths
