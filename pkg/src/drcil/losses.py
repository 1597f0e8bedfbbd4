"""Training objectives for the adaptation and fusion stages.

Loss functions take a ``ModelOutput`` from a single forward pass over a
mini-batch so the fusion stage computes every term from one graph.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelOutput
from .numcore import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    columns,
    cross_entropy,
    kl_divergence,
    scale,
    softmax_array,
    take_rows,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 4.0
    temperature: float = 2.0
    tro: float = 1.2
    la_enabled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass(frozen=True)
class ClassPrior:
    """Per-task sample counts and the logit offsets derived from them.

    Every class of task i receives tro * log(m_i / sum_j m_j).
    """

    task_counts: tuple[int, ...]
    classes_per_task: tuple[int, ...]
    tro: float = 1.2

    def __post_init__(self):
        if len(self.task_counts) != len(self.classes_per_task):
            raise ValueError("one sample count per task is required")
        if any(m <= 0 for m in self.task_counts):
            raise ValueError("task sample counts must be positive")

    @property
    def gamma(self) -> np.ndarray:
        total = float(sum(self.task_counts))
        blocks = [
            np.full(k, self.tro * math.log(m / total))
            for m, k in zip(self.task_counts, self.classes_per_task)
        ]
        return np.concatenate(blocks)


def class_prior(labels_by_task: Sequence[int], classes_per_task: Sequence[int], tro: float) -> ClassPrior:
    """Prior from the number of training rows each task contributes."""
    return ClassPrior(tuple(int(m) for m in labels_by_task), tuple(classes_per_task), tro)


def logit_adjust(logits: Tensor, prior: ClassPrior) -> Tensor:
    gamma = prior.gamma
    if logits.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"prior covers {gamma.shape[0]} classes, logits have {logits.shape[-1]}")
    return add(logits, Tensor(gamma))


def _maybe_adjust(logits: Tensor, prior: ClassPrior | None) -> Tensor:
    return logits if prior is None else logit_adjust(logits, prior)


def adaptation_loss(out: ModelOutput, local_labels) -> Tensor:
    """CE of the adaptation model's fused logits against current-task labels."""
    return cross_entropy(out.fused, local_labels)


def fusion_loss(out: ModelOutput, labels, prior: ClassPrior | None = None) -> Tensor:
    """CE on the fused logits over all seen classes, optionally logit-adjusted."""
    return cross_entropy(_maybe_adjust(out.fused, prior), labels)


def branch_loss(out: ModelOutput, labels, memory_rows, prior: ClassPrior | None = None) -> Tensor:
    """CE of the trainable-branch logits on every row plus CE of the frozen-
    branch old-head logits on the rows that came from memory.

    Only the first term is logit-adjusted.
    """
    if out.old_logits is None:
        raise ValueError("branch loss needs the frozen branch path")
    labels = np.asarray(labels)
    first = cross_entropy(_maybe_adjust(out.logits, prior), labels)
    memory_rows = np.asarray(memory_rows, dtype=np.int64)
    if memory_rows.size == 0 or out.n_prev == 0:
        return first
    old_block = columns(out.old_logits, 0, out.n_prev)
    second = cross_entropy(take_rows(old_block, memory_rows), labels[memory_rows])
    return add(first, second)


def teacher_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    return softmax_array(np.asarray(logits) / temperature)


def distill_loss(
    out: ModelOutput,
    p_old: np.ndarray | None,
    p_new: np.ndarray | None,
    temperature: float,
) -> Tensor:
    """KL from the previous model onto the fused old-class block plus KL from
    the adaptation model onto the fused new-class block.

    Either teacher may be None, in which case its term is dropped.
    """
    fused_prev, fused_cur = out.fused_blocks()
    terms = []
    if p_old is not None:
        if fused_prev is None or fused_prev.shape != np.shape(p_old):
            raise ShapeError("old teacher does not match the student's old-class block")
        terms.append(kl_divergence(p_old, fused_prev, temperature))
    if p_new is not None:
        if fused_cur.shape != np.shape(p_new):
            raise ShapeError("new teacher does not match the student's new-class block")
        terms.append(kl_divergence(p_new, fused_cur, temperature))
    if not terms:
        return Tensor(0.0)
    return terms[0] if len(terms) == 1 else add(terms[0], terms[1])


def overall_loss(weights: LossWeights, l_fusion, l_branch, l_distill) -> Tensor:
    """(1 - alpha) * fusion + alpha * branch + beta * distill."""
    a, b = weights.alpha, weights.beta
    total = scale(as_tensor(l_fusion), 1.0 - a)
    total = add(total, scale(as_tensor(l_branch), a))
    return add(total, scale(as_tensor(l_distill), b))
