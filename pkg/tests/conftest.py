import os
from pathlib import Path

import numpy as np
import pytest
import torch

from hetfcl.data import LabeledDataset, build_task_stream, glyphs, prepare_cache

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture(scope="session")
def mnist_root(tmp_path_factory) -> Path:
    """MNIST cache shared by the whole session (or a prebuilt one from MNIST_CACHE_DIR)."""
    pre = os.environ.get("MNIST_CACHE_DIR")
    if pre and (Path(pre) / "mnist" / "train" / "index.csv").is_file():
        return Path(pre)
    root = tmp_path_factory.mktemp("data")
    prepare_cache(root, "mnist")
    return root


@pytest.fixture(scope="session")
def glyph_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("glyphs")
    prepare_cache(root, "glyphs")
    return root


@pytest.fixture(scope="session")
def glyph_data():
    return glyphs(split="train"), glyphs(per_class=20, split="test")


@pytest.fixture
def glyph_stream(glyph_data):
    train, test = glyph_data
    return build_task_stream(train, 2, seed=0, test=test)


def make_dataset(labels, shape=(4, 4, 1), seed=0, classes=None) -> LabeledDataset:
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    images = rng.random((len(labels),) + shape).astype(np.float32)
    ids = tuple(sorted(set(labels.tolist()))) if classes is None else tuple(classes)
    return LabeledDataset(images, labels, ids)


def tiny_overrides(root: Path, **extra) -> dict[str, str]:
    """A seconds-scale experiment on the glyphs cache."""
    base = {
        "dataset": "glyphs", "data_root": str(root), "num_tasks": "2", "num_clients": "3",
        "archs": "M,S,S", "gamma": "1.0", "save_checkpoints": "false", "mock_dim": "8",
        "schedule.rounds": "1", "schedule.local_steps": "2", "schedule.proto_rounds": "1",
        "schedule.proto_steps": "2", "schedule.server_epochs": "1", "schedule.feedback_epochs": "1",
        "schedule.batch_size": "32", "synthetic.client_cur": "20", "synthetic.client_pre": "20",
        "synthetic.server_cur": "40", "synthetic.server_pre": "40", "strategy.ewc.fisher_samples": "16",
    }
    base.update({k: str(v) for k, v in extra.items()})
    return base


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
