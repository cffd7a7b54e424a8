"""Labeled datasets, random disjoint bags, synthetic generators and CSV I/O."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np


class CsvError(ValueError):
    """Base class for dataset file problems."""


class EmptyFileError(CsvError):
    pass


class NonNumericError(CsvError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=int)
        if X.ndim != 2:
            raise ValueError("features must be a 2-D array (n_samples, dim)")
        if y.shape != (X.shape[0],):
            raise ValueError("labels must be a vector with one entry per sample")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Bag:
    instance_indices: np.ndarray
    proportions: np.ndarray

    @property
    def size(self) -> int:
        return int(self.instance_indices.size)


@dataclass(frozen=True)
class LLPDataset:
    """Bags over a parent dataset.

    Training code should only touch ``features`` and ``bags``; the parent's
    labels are reachable through :meth:`evaluation_labels` for scoring.
    """

    parent: LabeledDataset = field(repr=False)
    bags: tuple[Bag, ...]

    @property
    def num_bags(self) -> int:
        return len(self.bags)

    @property
    def num_classes(self) -> int:
        return self.parent.num_classes

    @property
    def features(self) -> np.ndarray:
        return self.parent.features

    def bag_features(self, i: int) -> np.ndarray:
        return self.parent.features[self.bags[i].instance_indices]

    def instance_indices(self) -> np.ndarray:
        """Indices of all bagged instances, in bag order."""
        return np.concatenate([b.instance_indices for b in self.bags])

    def evaluation_labels(self) -> np.ndarray:
        """Hidden labels of the bagged instances, in bag order."""
        return self.parent.labels[self.instance_indices()]


def compute_proportions(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("cannot compute proportions of an empty label list")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.bincount(labels, minlength=num_classes) / labels.size


def make_bags(data: LabeledDataset, bag_size: int, seed: int = 0) -> LLPDataset:
    """Shuffle with ``seed`` and cut into consecutive bags of ``bag_size``.

    A trailing remainder shorter than ``bag_size`` is dropped.
    """
    n = len(data)
    if bag_size <= 0 or bag_size > n:
        raise ValueError(f"bag_size must be in [1, {n}] (dataset size), got {bag_size}")
    order = np.random.default_rng(seed).permutation(n)
    n_bags = n // bag_size
    bags = []
    for i in range(n_bags):
        idx = order[i * bag_size : (i + 1) * bag_size]
        idx.setflags(write=False)
        props = compute_proportions(data.labels[idx], data.num_classes)
        props.setflags(write=False)
        bags.append(Bag(idx, props))
    return LLPDataset(parent=data, bags=tuple(bags))


def two_moons(n: int, noise_std: float = 0.1, seed: int = 0) -> LabeledDataset:
    """Two interleaving half circles of radius 1.

    Class 0 is the upper unit half circle; class 1 is the mirrored half
    circle placed at ``(1 - cos t, 0.5 - sin t)``. Class 0 gets ``ceil(n/2)``
    points. Isotropic Gaussian noise of ``noise_std`` is added, then the rows
    are shuffled.
    """
    if n < 2:
        raise ValueError("two_moons needs n >= 2")
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    n0 = math.ceil(n / 2)
    n1 = n - n0
    t0 = np.linspace(0, np.pi, n0)
    t1 = np.linspace(0, np.pi, n1)
    X = np.vstack(
        [
            np.column_stack([np.cos(t0), np.sin(t0)]),
            np.column_stack([1 - np.cos(t1), 0.5 - np.sin(t1)]),
        ]
    )
    y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    rng = np.random.default_rng(seed)
    if noise_std > 0:
        X = X + rng.normal(scale=noise_std, size=X.shape)
    perm = rng.permutation(n)
    return LabeledDataset(X[perm], y[perm], 2)


def gaussian_blobs(n: int, num_classes: int = 3, dim: int = 2, spread: float = 1.0, seed: int = 0):
    """Isotropic Gaussian clusters with centers drawn uniformly in [-5, 5]^dim."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-5, 5, size=(num_classes, dim))
    y = np.arange(n) % num_classes
    X = centers[y] + rng.normal(scale=spread, size=(n, dim))
    perm = rng.permutation(n)
    return LabeledDataset(X[perm], y[perm], num_classes)


def load_csv(path, label_column: str = "label") -> tuple[LabeledDataset, dict]:
    """Read a header-first CSV. Returns the dataset and the label -> index map.

    Labels are re-indexed densely in order of first appearance; every other
    column must be numeric.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows) < 2:
        raise EmptyFileError(f"{path} has no data rows")
    header = rows[0]
    if label_column not in header:
        raise CsvError(f"{path}: no column named {label_column!r}")
    li = header.index(label_column)
    mapping: dict[str, int] = {}
    features, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            features.append([float(v) for k, v in enumerate(row) if k != li])
        except ValueError as exc:
            raise NonNumericError(f"{path}:{lineno}: {exc}") from None
        labels.append(mapping.setdefault(row[li], len(mapping)))
    if not labels:
        raise EmptyFileError(f"{path} has no data rows")
    return LabeledDataset(np.array(features), np.array(labels), len(mapping)), mapping


def save_csv(data: LabeledDataset, path, label_column: str = "label") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(data.dim)] + [label_column])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def save_partition(llp: LLPDataset, path) -> None:
    """Write the bag partition as ``instance_index,bag_index`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance_index", "bag_index"])
        for b, bag in enumerate(llp.bags):
            for i in bag.instance_indices:
                w.writerow([int(i), b])


def load_partition(data: LabeledDataset, path) -> LLPDataset:
    groups: dict[int, list[int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            groups.setdefault(int(row["bag_index"]), []).append(int(row["instance_index"]))
    if not groups:
        raise EmptyFileError(f"{path} has no data rows")
    bags = []
    for b in sorted(groups):
        idx = np.array(groups[b], dtype=int)
        bags.append(Bag(idx, compute_proportions(data.labels[idx], data.num_classes)))
    seen = np.concatenate([b.instance_indices for b in bags])
    if np.unique(seen).size != seen.size:
        raise CsvError(f"{path}: bags overlap")
    return LLPDataset(parent=data, bags=tuple(bags))
