"""Datasets and class-incremental task streams (B0, B50, long-tailed)."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed dataset file."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class StreamConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class TaskSpec:
    task_index: int
    classes: tuple[int, ...]
    train_samples: tuple[Sample, ...]
    test_samples: tuple[Sample, ...]

    def train_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return stack(self.train_samples)

    def test_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return stack(self.test_samples)

    def class_counts(self) -> dict[int, int]:
        counts = {c: 0 for c in self.classes}
        for s in self.train_samples:
            counts[s.label] += 1
        return counts


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[TaskSpec, ...]
    protocol: str
    seed: int

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def class_order(self) -> list[int]:
        return [c for t in self.tasks for c in t.classes]

    def seen_classes(self, t: int) -> list[int]:
        """Classes of tasks 1..t, in stream order (t is 1-based)."""
        return [c for task in self.tasks[:t] for c in task.classes]

    def eval_pool(self, t: int) -> list[Sample]:
        """Test samples of every class observed up to and including task t."""
        return [s for task in self.tasks[:t] for s in task.test_samples]


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    X = np.stack([s.features for s in samples]).astype(np.float64, copy=False)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def to_samples(X: np.ndarray, y: np.ndarray) -> list[Sample]:
    return [Sample(np.asarray(x, dtype=np.float64), int(c)) for x, c in zip(X, y)]


# ------------------------------------------------------------------ loading

def load_csv_dataset(path, feature_count: int, scale: bool = False) -> list[Sample]:
    """Read label-first CSV rows into samples.

    With ``scale`` the feature values are min-max mapped onto [0, 1] using
    the global extremes of the file.
    """
    path = Path(path)
    labels: list[int] = []
    rows: list[list[float]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != feature_count + 1:
                raise SchemaError(
                    f"{path}:{lineno}: expected {feature_count + 1} fields, got {len(row)}"
                )
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if label < 0:
                raise ParseError(f"{path}:{lineno}: negative label {label}")
            labels.append(label)
            rows.append(values)
    if not rows:
        return []
    X = np.array(rows, dtype=np.float64)
    if scale:
        lo, hi = X.min(), X.max()
        X = (X - lo) / (hi - lo) if hi > lo else np.zeros_like(X)
    return to_samples(X, np.array(labels))


def save_csv_dataset(samples: Sequence[Sample], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for s in samples:
            w.writerow([s.label, *(repr(float(v)) for v in s.features)])


def make_synthetic_gaussians(
    n_classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    mean_scale: float = 1.0,
) -> list[Sample]:
    """Isotropic Gaussian blobs, one per class, with seeded random means."""
    if n_classes < 2 or dim < 2:
        raise ValueError("need n_classes >= 2 and dim >= 2")
    if per_class < 1 or spread < 0:
        raise ValueError("per_class must be positive and spread non-negative")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, mean_scale, size=(n_classes, dim))
    noise = rng.normal(0.0, 1.0, size=(n_classes, per_class, dim))
    X = (means[:, None, :] + spread * noise).reshape(-1, dim)
    y = np.repeat(np.arange(n_classes), per_class)
    return to_samples(X, y)


def holdout(samples: Sequence[Sample], test_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Per-class seeded train/test split."""
    rng = np.random.default_rng(seed)
    by_class = _group(samples)
    train, test = [], []
    for c in sorted(by_class):
        items = by_class[c]
        perm = rng.permutation(len(items))
        n_test = int(round(test_fraction * len(items)))
        test_idx = set(perm[:n_test].tolist())
        for i, s in enumerate(items):
            (test if i in test_idx else train).append(s)
    return train, test


def _group(samples: Sequence[Sample]) -> dict[int, list[Sample]]:
    out: dict[int, list[Sample]] = {}
    for s in samples:
        out.setdefault(s.label, []).append(s)
    return out


# ---------------------------------------------------------------- protocols

def _build_stream(train, test, class_groups, protocol, seed) -> TaskStream:
    train_by = _group(train)
    test_by = _group(test)
    tasks = []
    for i, group in enumerate(class_groups, start=1):
        tasks.append(
            TaskSpec(
                task_index=i,
                classes=tuple(int(c) for c in group),
                train_samples=tuple(s for c in group for s in train_by.get(c, [])),
                test_samples=tuple(s for c in group for s in test_by.get(c, [])),
            )
        )
    return TaskStream(tuple(tasks), protocol, seed)


def _prepare(samples, n_classes, seed, test_samples, test_fraction):
    samples = [s for s in samples if s.label < n_classes]
    if test_samples is None:
        train, test = holdout(samples, test_fraction, seed)
    else:
        train, test = samples, [s for s in test_samples if s.label < n_classes]
    order = np.random.default_rng(seed).permutation(n_classes).tolist()
    return train, test, order


def split_b0(
    samples: Sequence[Sample],
    n_classes: int,
    steps: int,
    seed: int,
    test_samples: Sequence[Sample] | None = None,
    test_fraction: float = 0.2,
) -> TaskStream:
    """Equal class groups per step after a seeded shuffle of the class order.

    Without ``test_samples`` a per-class ``test_fraction`` is held out.
    """
    if steps < 1 or n_classes % steps:
        raise StreamConfigError(f"{steps} steps do not divide {n_classes} classes")
    train, test, order = _prepare(samples, n_classes, seed, test_samples, test_fraction)
    k = n_classes // steps
    groups = [order[i * k:(i + 1) * k] for i in range(steps)]
    return _build_stream(train, test, groups, "B0", seed)


def synthetic_benchmark(
    seed: int,
    n_classes: int = 10,
    steps: int = 5,
    per_class: int = 1000,
    dim: int = 20,
    spread: float = 1.0,
    test_fraction: float = 0.5,
) -> TaskStream:
    """The desk-scale B0 stream used by the direction checks.

    Overlapping Gaussian classes keep the task hard enough that forgetting
    and classifier bias show up, and the large test split keeps per-seed
    accuracy noise below one percent.
    """
    data = make_synthetic_gaussians(n_classes, per_class, dim, spread, seed=seed)
    return split_b0(data, n_classes, steps, seed, test_fraction=test_fraction)


def split_b50(
    samples: Sequence[Sample],
    n_classes: int,
    base_classes: int,
    step_size: int,
    seed: int,
    test_samples: Sequence[Sample] | None = None,
    test_fraction: float = 0.2,
) -> TaskStream:
    """A base task of ``base_classes`` followed by ``step_size`` increments."""
    rest = n_classes - base_classes
    if base_classes < 1 or rest < 0 or step_size < 1 or rest % step_size:
        raise StreamConfigError(
            f"base {base_classes} + k*{step_size} cannot reach {n_classes} classes"
        )
    train, test, order = _prepare(samples, n_classes, seed, test_samples, test_fraction)
    groups = [order[:base_classes]]
    groups += [order[i:i + step_size] for i in range(base_classes, n_classes, step_size)]
    return _build_stream(train, test, groups, "B50", seed)


def longtail_counts(n_classes: int, n_max: int, imbalance_factor: float) -> list[int]:
    """Exponential profile n_max * rho^(-i/(K-1)), clamped to at least one."""
    if n_classes == 1:
        return [n_max]
    counts = []
    for i in range(n_classes):
        raw = n_max * imbalance_factor ** (-i / (n_classes - 1))
        n = int(math.floor(raw + 1e-9))
        if n < 1:
            log.warning("long-tail count for class rank %d rounds to 0; clamped to 1", i)
            n = 1
        counts.append(n)
    return counts


def apply_longtail(stream: TaskStream, imbalance_factor: float = 100.0, mode: str = "ordered", seed: int = 0) -> TaskStream:
    """Subsample training data to a long-tailed per-class profile.

    ``ordered`` gives the head counts to the classes that arrive first in the
    stream; ``shuffled`` permutes the same counts across classes. Test sets
    are left alone.
    """
    if imbalance_factor < 1:
        raise StreamConfigError("imbalance_factor must be >= 1")
    if mode not in ("ordered", "shuffled"):
        raise StreamConfigError(f"unknown long-tail mode {mode!r}")
    if imbalance_factor == 1:
        return stream
    order = stream.class_order
    per_class = {c: 0 for c in order}
    for task in stream.tasks:
        for c, n in task.class_counts().items():
            per_class[c] = n
    counts = longtail_counts(len(order), max(per_class.values()), imbalance_factor)
    rng = np.random.default_rng(seed)
    if mode == "shuffled":
        counts = [counts[i] for i in rng.permutation(len(counts))]
    quota = dict(zip(order, counts))

    tasks = []
    for task in stream.tasks:
        by = _group(task.train_samples)
        kept = []
        for c in task.classes:
            items = by.get(c, [])
            n = min(quota[c], len(items))
            idx = np.sort(rng.permutation(len(items))[:n])
            kept.extend(items[i] for i in idx)
        tasks.append(replace(task, train_samples=tuple(kept)))
    return TaskStream(tuple(tasks), f"LT-{mode}", stream.seed)
