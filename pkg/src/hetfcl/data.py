"""Labeled image datasets, class-incremental task streams and Dirichlet client partitions.

Images are kept as float32 arrays shaped (N, H, W, C) in [0, 1]; models consume
them as NCHW tensors via :func:`to_tensor`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .utils import make_rng

SPLITS = ("train", "test")
MANIFEST = "index.csv"


class DatasetMissingError(FileNotFoundError):
    """Raised when a dataset cache directory or manifest is absent."""


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_ids: tuple[int, ...]
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.images.ndim != 4:
            raise ValueError("images must be shaped (N, H, W, C)")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class_ids must be unique")
        unknown = set(np.unique(self.labels).tolist()) - set(self.class_ids)
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} missing from class_ids")
        if len(self.images) and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices_of(self, classes: Sequence[int]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, list(classes)))

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_ids, self.split, self.name)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) array -> (N, C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))


def concat_with_offsets(datasets: Sequence[LabeledDataset], name: str = "") -> LabeledDataset:
    """Stack datasets, shifting each one's class ids past the previous maximum.

    Used to build composite benchmarks (e.g. three 10-class sources -> ids 0-29).
    """
    images, labels, ids = [], [], []
    offset = 0
    for ds in datasets:
        remap = {c: offset + i for i, c in enumerate(sorted(ds.class_ids))}
        images.append(ds.images)
        labels.append(np.array([remap[int(y)] for y in ds.labels], dtype=np.int64))
        ids.extend(remap[c] for c in sorted(ds.class_ids))
        offset += len(ds.class_ids)
    split = datasets[0].split
    return LabeledDataset(np.concatenate(images), np.concatenate(labels), tuple(ids), split, name)


# ---------------------------------------------------------------------------
# task streams


@dataclass(frozen=True, eq=False)
class TaskSpec:
    index: int
    classes: tuple[int, ...]
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass(frozen=True, eq=False)
class TaskStream:
    tasks: tuple[TaskSpec, ...]
    train: LabeledDataset
    test: LabeledDataset | None
    seed: int

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def task(self, t: int) -> TaskSpec:
        if not 1 <= t <= self.num_tasks:
            raise IndexError(f"task {t} outside 1..{self.num_tasks}")
        return self.tasks[t - 1]

    def classes_upto(self, t: int) -> tuple[int, ...]:
        return tuple(c for spec in self.tasks[:t] for c in spec.classes)

    def classes_before(self, t: int) -> tuple[int, ...]:
        return self.classes_upto(t - 1)

    def block_sizes(self) -> list[int]:
        return [len(spec.classes) for spec in self.tasks]


def build_task_stream(
    dataset: LabeledDataset,
    num_tasks: int,
    seed: int = 0,
    test: LabeledDataset | None = None,
    shuffle_classes: bool = False,
) -> TaskStream:
    """Split the label space into ``num_tasks`` disjoint, near-equal class blocks.

    Classes are taken in label order (contiguous blocks) unless ``shuffle_classes``
    is set, in which case the order is a seeded permutation. When the class count
    is not divisible, the first tasks receive one extra class.
    """
    classes = sorted(dataset.class_ids)
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    if num_tasks > len(classes):
        raise ValueError(f"num_tasks={num_tasks} exceeds the {len(classes)} available classes")
    if shuffle_classes:
        classes = [classes[i] for i in make_rng(seed, 0x7A5C).permutation(len(classes))]
    base, extra = divmod(len(classes), num_tasks)
    tasks, start = [], 0
    for t in range(num_tasks):
        size = base + (1 if t < extra else 0)
        block = tuple(classes[start:start + size])
        start += size
        test_idx = test.indices_of(block) if test is not None else np.empty(0, dtype=np.int64)
        tasks.append(TaskSpec(t + 1, block, dataset.indices_of(block), test_idx))
    stream = TaskStream(tuple(tasks), dataset, test, seed)
    _check_stream(stream)
    return stream


def _check_stream(stream: TaskStream) -> None:
    seen: set[int] = set()
    for spec in stream.tasks:
        if seen & set(spec.classes):
            raise AssertionError("task class sets overlap")
        seen |= set(spec.classes)
    if seen != set(stream.train.class_ids):
        raise AssertionError("task class sets do not cover the dataset")


# ---------------------------------------------------------------------------
# client partitions


@dataclass(frozen=True, eq=False)
class ClientPartition:
    stream: TaskStream
    gamma: float
    seed: int
    # client id -> task index -> sorted train-sample indices
    assignments: dict[int, dict[int, np.ndarray]]

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def indices(self, k: int, t: int) -> np.ndarray:
        return self.assignments[k][t]

    def count(self, k: int, t: int) -> int:
        return len(self.assignments[k][t])

    @property
    def counts(self) -> dict[int, dict[int, int]]:
        return {k: {t: len(ix) for t, ix in per.items()} for k, per in self.assignments.items()}

    def rows(self) -> list[tuple[int, int, int, int]]:
        """One (task, client, class, count) row per combination, zero counts included."""
        labels = self.stream.train.labels
        out = []
        for spec in self.stream.tasks:
            for k in sorted(self.assignments):
                got = labels[self.assignments[k][spec.index]]
                for c in spec.classes:
                    out.append((spec.index, k, c, int(np.sum(got == c))))
        return out

    def write_table(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("task\tclient\tclass\tcount\n")
            for row in self.rows():
                fh.write("\t".join(str(v) for v in row) + "\n")


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` by ``proportions``; ties go to the lower index."""
    raw = proportions / proportions.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        frac = raw - counts
        order = sorted(range(len(frac)), key=lambda i: (-frac[i], i))
        for i in order[:short]:
            counts[i] += 1
    return counts


def partition_dirichlet(
    stream: TaskStream,
    num_clients: int,
    gamma: float,
    seed: int = 0,
    max_retries: int = 100,
) -> ClientPartition:
    """Non-IID split of every task's training samples over ``num_clients`` clients.

    Per task and per class a proportion vector is drawn from Dir(gamma); class
    samples are dealt out by largest-remainder rounding. A client left empty for a
    task triggers a redraw of one class vector (round-robin over the task's
    classes) up to ``max_retries`` times.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    labels = stream.train.labels
    assignments: dict[int, dict[int, np.ndarray]] = {k: {} for k in range(num_clients)}
    for spec in stream.tasks:
        if len(spec.train_indices) < num_clients:
            raise PartitionError(f"task {spec.index} has fewer samples than clients")
        rng = make_rng(seed, spec.index)
        per_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in spec.classes}
        props = {c: rng.dirichlet(np.full(num_clients, gamma)) for c in spec.classes}
        counts = {c: largest_remainder(props[c], len(per_class[c])) for c in spec.classes}
        retries = 0
        while True:
            totals = sum(counts.values())
            if np.all(totals >= 1):
                break
            if retries >= max_retries:
                raise PartitionError(
                    f"task {spec.index}: could not give every client a sample after {max_retries} retries"
                )
            c = spec.classes[retries % len(spec.classes)]
            props[c] = rng.dirichlet(np.full(num_clients, gamma))
            counts[c] = largest_remainder(props[c], len(per_class[c]))
            retries += 1
        chunks: dict[int, list[np.ndarray]] = {k: [] for k in range(num_clients)}
        for c in spec.classes:
            bounds = np.concatenate([[0], np.cumsum(counts[c])])
            for k in range(num_clients):
                chunks[k].append(per_class[c][bounds[k]:bounds[k + 1]])
        for k in range(num_clients):
            assignments[k][spec.index] = np.sort(np.concatenate(chunks[k])).astype(np.int64)
    return ClientPartition(stream, float(gamma), seed, assignments)


def class_entropy(partition: ClientPartition, k: int, t: int) -> float:
    """Shannon entropy (nats) of client k's label distribution within task t."""
    got = partition.stream.train.labels[partition.indices(k, t)]
    _, n = np.unique(got, return_counts=True)
    p = n / n.sum()
    return float(-(p * np.log(p)).sum())


@dataclass(frozen=True, eq=False)
class ClientShard:
    """Materialized real data of one client for one task.

    The owner tag lets client workers reject shards belonging to someone else.
    """

    owner: int
    task: int
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def client_shard(partition: ClientPartition, k: int, t: int) -> ClientShard:
    idx = partition.indices(k, t)
    if len(idx) == 0:
        raise PartitionError(f"client {k} holds no samples for task {t}")
    ds = partition.stream.train
    return ClientShard(k, t, ds.images[idx], ds.labels[idx])


def iterate_batches(
    images: np.ndarray, labels: np.ndarray, batch_size: int, rng: np.random.Generator
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    order = rng.permutation(len(labels))
    for start in range(0, len(order), batch_size):
        sel = order[start:start + batch_size]
        yield to_tensor(images[sel]), torch.from_numpy(labels[sel].astype(np.int64))


def client_loader(
    partition: ClientPartition, k: int, t: int, batch_size: int, seed: int, epoch: int = 0
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Shuffled batches covering exactly D_k^(t) once.

    Shuffle order depends only on (seed, k, t, epoch).
    """
    shard = client_shard(partition, k, t)
    return iterate_batches(shard.images, shard.labels, batch_size, make_rng(seed, k, t, epoch))


# ---------------------------------------------------------------------------
# on-disk cache


def write_cache(dataset: LabeledDataset, root: str | Path) -> Path:
    """Write ``<root>/<name>/<split>/`` PNG files plus an index manifest."""
    out = Path(root) / dataset.name / dataset.split
    out.mkdir(parents=True, exist_ok=True)
    with open(out / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "label"])
        for i, (img, y) in enumerate(zip(dataset.images, dataset.labels)):
            fname = f"{i:06d}.png"
            arr = np.round(img[..., 0] * 255.0).astype(np.uint8) if img.shape[-1] == 1 else np.round(img * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(out / fname)
            w.writerow([fname, int(y)])
    return out


def load_cached(root: str | Path, name: str, split: str) -> LabeledDataset:
    base = Path(root) / name / split
    manifest = base / MANIFEST
    if not manifest.is_file():
        raise DatasetMissingError(f"no dataset cache at {base} (expected {MANIFEST})")
    files, labels = [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            files.append(row["file"])
            labels.append(int(row["label"]))
    imgs = []
    for f in files:
        arr = np.asarray(Image.open(base / f), dtype=np.float32) / 255.0
        imgs.append(arr[..., None] if arr.ndim == 2 else arr)
    labels_arr = np.asarray(labels, dtype=np.int64)
    class_ids = tuple(sorted(set(labels)))
    return LabeledDataset(np.stack(imgs), labels_arr, class_ids, split, name)


def load_dataset(root: str | Path, name: str) -> tuple[LabeledDataset, LabeledDataset]:
    return load_cached(root, name, "train"), load_cached(root, name, "test")


def mnist_subset(test_per_class: int = 100) -> tuple[LabeledDataset, LabeledDataset]:
    """The 5,000-image MNIST subset bundled with mlxtend, split per class."""
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = (x.reshape(-1, 28, 28, 1) / 255.0).astype(np.float32)
    y = y.astype(np.int64)
    rng = make_rng(20240501)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        test_idx.append(idx[:test_per_class])
        train_idx.append(idx[test_per_class:])
    tr, te = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))
    ids = tuple(range(10))
    return (LabeledDataset(x[tr], y[tr], ids, "train", "mnist"),
            LabeledDataset(x[te], y[te], ids, "test", "mnist"))


def glyphs(num_classes: int = 10, per_class: int = 60, size: int = 28, seed: int = 0,
           split: str = "train") -> LabeledDataset:
    """Procedural grayscale dataset: one smooth random template per class plus noise.

    Cheap stand-in for MNIST in unit tests and smoke runs.
    """
    templ_rng = make_rng(seed, 1)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    templates = []
    for _ in range(num_classes):
        img = np.zeros((size, size))
        for _ in range(3):
            cx, cy = templ_rng.uniform(0.2, 0.8, 2)
            s = templ_rng.uniform(0.08, 0.2)
            img += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        templates.append(img / img.max())
    rng = make_rng(seed, 2 if split == "train" else 3)
    imgs, labels = [], []
    for c in range(num_classes):
        shift = rng.integers(-2, 3, size=(per_class, 2))
        noise = rng.normal(0, 0.08, size=(per_class, size, size))
        for i in range(per_class):
            im = np.roll(templates[c], tuple(shift[i]), axis=(0, 1)) + noise[i]
            imgs.append(np.clip(im, 0, 1))
            labels.append(c)
    arr = np.asarray(imgs, dtype=np.float32)[..., None]
    return LabeledDataset(arr, np.asarray(labels, dtype=np.int64), tuple(range(num_classes)), split, "glyphs")


DATASETS = ("mnist", "glyphs")


def prepare_cache(root: str | Path, name: str = "mnist") -> Path:
    if name == "mnist":
        train, test = mnist_subset()
    elif name == "glyphs":
        train, test = glyphs(split="train"), glyphs(per_class=20, split="test")
    else:
        raise ValueError(f"unknown dataset {name!r}; available: {DATASETS}")
    write_cache(train, root)
    write_cache(test, root)
    return Path(root) / name

