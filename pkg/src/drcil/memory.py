"""Fixed-budget rehearsal memory with herding exemplar selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datastream import Sample, TaskSpec, load_csv_dataset, save_csv_dataset, stack

log = logging.getLogger(__name__)

FeatureFn = Callable[[np.ndarray], np.ndarray]

POLICIES = ("fixed_total", "per_class")


def select_exemplars(samples: Sequence[Sample], k: int, feature_fn: FeatureFn) -> list[Sample]:
    """Herding: greedily add the sample that pulls the running exemplar mean
    closest (Euclidean) to the class mean in feature space.

    ``feature_fn`` maps a stacked (n, in_dim) array to (n, d) features. The
    returned order is the herding order, so any prefix is itself the
    herding selection for a smaller k.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0 or not samples:
        return []
    if k > len(samples):
        log.warning("asked for %d exemplars but the class has %d samples", k, len(samples))
        k = len(samples)
    X, _ = stack(samples)
    feats = np.asarray(feature_fn(X), dtype=np.float64)
    order = herding_order(feats, k)
    return [samples[i] for i in order]


def herding_order(feats: np.ndarray, k: int) -> list[int]:
    mu = feats.mean(axis=0)
    running = np.zeros_like(mu)
    available = np.ones(len(feats), dtype=bool)
    chosen: list[int] = []
    for j in range(1, k + 1):
        cand = (running + feats) / j
        dist = np.linalg.norm(mu - cand, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        available[i] = False
        running = running + feats[i]
    return chosen


@dataclass
class RehearsalMemory:
    policy: str = "fixed_total"
    size: int = 2000
    store: dict[int, list[Sample]] = field(default_factory=dict)
    insertion_step: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown memory policy {self.policy!r}")
        if self.size < 0:
            raise ValueError("memory size must be non-negative")

    def __len__(self) -> int:
        return sum(len(v) for v in self.store.values())

    @property
    def classes(self) -> list[int]:
        return list(self.store)

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self.store.items()}

    def samples(self) -> list[Sample]:
        return [s for v in self.store.values() for s in v]

    def quotas(self, classes: Sequence[int]) -> dict[int, int]:
        """Per-class exemplar quota for the given classes in insertion order."""
        if self.policy == "per_class":
            return {c: self.size for c in classes}
        n = len(classes)
        if n == 0:
            return {}
        base, extra = divmod(self.size, n)
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}

    def copy(self) -> "RehearsalMemory":
        return RehearsalMemory(
            self.policy,
            self.size,
            {c: list(v) for c, v in self.store.items()},
            dict(self.insertion_step),
        )


def update_memory(memory: RehearsalMemory, new_task: TaskSpec, feature_fn: FeatureFn) -> RehearsalMemory:
    """Shrink old classes to their new quota and add the task's classes.

    Old classes are truncated along their stored herding order; new classes
    are selected by herding with ``feature_fn``. Returns a new memory.
    """
    clash = set(new_task.classes) & set(memory.store)
    if clash:
        raise ValueError(f"classes {sorted(clash)} are already in memory")
    out = memory.copy()
    all_classes = out.classes + list(new_task.classes)
    quota = out.quotas(all_classes)
    for c in out.classes:
        out.store[c] = out.store[c][: quota[c]]
    by_class: dict[int, list[Sample]] = {c: [] for c in new_task.classes}
    for s in new_task.train_samples:
        by_class[s.label].append(s)
    for c in new_task.classes:
        items = by_class[c]
        k = min(quota[c], len(items))
        out.store[c] = select_exemplars(items, k, feature_fn)
        out.insertion_step[c] = new_task.task_index
    return out


def imbalance_ratio(new_task: TaskSpec, memory: RehearsalMemory) -> float | None:
    """Mean per-class count in the new task over mean per-class count in memory.

    Returns None ("not applicable") when memory holds nothing.
    """
    counts = [n for n in memory.counts().values()]
    if not counts or sum(counts) == 0:
        return None
    new_counts = list(new_task.class_counts().values())
    return float(np.mean(new_counts) / np.mean(counts))


def save_memory(memory: RehearsalMemory, path) -> None:
    save_csv_dataset(memory.samples(), path)


def load_memory(path, feature_count: int, policy: str, size: int) -> RehearsalMemory:
    """Rebuild a memory from CSV; row order fixes class insertion order."""
    mem = RehearsalMemory(policy, size)
    for s in load_csv_dataset(path, feature_count):
        if s.label not in mem.store:
            mem.store[s.label] = []
            mem.insertion_step[s.label] = len(mem.insertion_step) + 1
        mem.store[s.label].append(s)
    return mem
