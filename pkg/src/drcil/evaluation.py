"""Accuracy evaluation and experiment result records."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datastream import Sample, stack
from .model import predict


@dataclass
class TaskOutcome:
    task_index: int
    seen_classes: int
    accuracy: float
    per_task_accuracy: dict[int, float]
    imbalance_ratio: float | None
    wall_time: float = 0.0


def evaluate(
    model,
    test_pool: Sequence[Sample],
    seen_classes: Sequence[int],
    task_classes: Sequence[Sequence[int]] = (),
) -> tuple[float, dict[int, float]]:
    """Top-1 accuracy over the pool and per-task accuracy.

    ``seen_classes`` maps model output columns to global labels; tasks are
    numbered from 1 in the order of ``task_classes``.
    """
    if not test_pool:
        raise ValueError("cannot evaluate on an empty test pool")
    X, y = stack(test_pool)
    cols = predict(model, X)
    pred = np.asarray(seen_classes)[cols]
    correct = pred == y
    per_task = {}
    for i, classes in enumerate(task_classes, start=1):
        mask = np.isin(y, list(classes))
        if mask.any():
            per_task[i] = float(correct[mask].mean())
    return float(correct.mean()), per_task


@dataclass
class StepRecord:
    step: int
    seen_classes: int
    accuracy: float
    per_task_accuracy: dict[int, float]
    imbalance_ratio: float | None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "seen_classes": self.seen_classes,
            "accuracy": self.accuracy,
            "per_task_accuracy": {str(k): v for k, v in self.per_task_accuracy.items()},
            "imbalance_ratio": self.imbalance_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(
            d["step"],
            d["seen_classes"],
            d["accuracy"],
            {int(k): v for k, v in d["per_task_accuracy"].items()},
            d["imbalance_ratio"],
        )


@dataclass
class ExperimentResult:
    """Per-step accuracies of one run plus Avg (mean over steps) and Last.

    Wall-clock timings are kept out of the record so that identical runs
    produce identical records; they travel in ``timings``.
    """

    config: dict
    seed: int
    steps: list[StepRecord]
    avg_accuracy: float
    last_accuracy: float
    timings: list[float] = field(default_factory=list, compare=False)

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[TaskOutcome], config: dict, seed: int) -> "ExperimentResult":
        steps = [
            StepRecord(o.task_index, o.seen_classes, o.accuracy, dict(o.per_task_accuracy), o.imbalance_ratio)
            for o in outcomes
        ]
        accs = [s.accuracy for s in steps]
        return cls(
            config=config,
            seed=seed,
            steps=steps,
            avg_accuracy=float(np.mean(accs)) if accs else float("nan"),
            last_accuracy=accs[-1] if accs else float("nan"),
            timings=[o.wall_time for o in outcomes],
        )

    @property
    def accuracies(self) -> list[float]:
        return [s.accuracy for s in self.steps]

    def to_record(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "steps": [s.to_dict() for s in self.steps],
            "avg_accuracy": self.avg_accuracy,
            "last_accuracy": self.last_accuracy,
        }

    @classmethod
    def from_record(cls, d: dict) -> "ExperimentResult":
        return cls(
            config=d["config"],
            seed=d["seed"],
            steps=[StepRecord.from_dict(s) for s in d["steps"]],
            avg_accuracy=d["avg_accuracy"],
            last_accuracy=d["last_accuracy"],
        )

    def metrics(self) -> tuple:
        """Everything except the config snapshot, for cross-pipeline comparison."""
        return (
            self.seed,
            tuple((s.step, s.seen_classes, s.accuracy, tuple(sorted(s.per_task_accuracy.items())), s.imbalance_ratio) for s in self.steps),
            self.avg_accuracy,
            self.last_accuracy,
        )
