"""Quick invariant suite behind ``drcil selftest``.

Each check returns ``(passed, detail)``; none of them trains a model for
more than a few epochs, so the whole suite runs in a few seconds.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from ..datastream import Sample, TaskSpec
from ..losses import (
    ClassPrior,
    LossWeights,
    adaptation_loss,
    branch_loss,
    distill_loss,
    fusion_loss,
    overall_loss,
    teacher_probs,
)
from ..memory import RehearsalMemory, update_memory
from ..model import DrcModel, compute_branch_logits, expand_for_task
from ..numcore import GradTape, Tensor, backward, numerical_grad


def random_model(rng: np.random.Generator, d: int, tasks: tuple[int, ...], in_dim: int = 5) -> DrcModel:
    model = DrcModel.create([in_dim, 7, d], tasks[0], rng)
    for n in tasks[1:]:
        model.new_branch.weight.data += rng.normal(0, 0.3, (d, d))
        model = expand_for_task(model, n, rng)
    model.new_branch.weight.data += rng.normal(0, 0.3, (d, d))
    for h in model.heads:
        h.bias.data += rng.normal(size=h.bias.shape)
    return model


def check_merge_identity(n_models: int = 50, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_models):
        d = (4, 16, 64)[i % 3]
        tasks = tuple(int(k) for k in rng.integers(1, 4, size=int(rng.integers(1, 6))))
        prev = random_model(rng, d, tasks)
        nxt = expand_for_task(prev, 2, rng)
        f = Tensor(rng.normal(size=(6, d)))
        want = prev.forward_from_features(f).fused.data
        got = compute_branch_logits(nxt, f=f).old_prev.data
        worst = max(worst, float(np.max(np.abs(want - got))))
    return worst <= 1e-10, f"max |diff| {worst:.2e} over {n_models} models"


def _loss_cases(rng):
    model = random_model(rng, 4, (2, 3))
    x = Tensor(rng.normal(size=(6, 5)))
    y = np.array([0, 1, 2, 3, 4, 2])
    mem = np.array([0, 1])
    prior = ClassPrior((120, 7), (2, 3), tro=1.2)
    T = 2.0
    p_old = rng.dirichlet(np.ones(2), size=6)
    p_new = rng.dirichlet(np.ones(3), size=6)
    adapted = DrcModel(model.extractor, [model.heads[-1]], model.new_branch, model.old_branch)
    yl = np.array([0, 1, 2, 0, 1, 2])
    w = LossWeights()
    cases = {
        "adaptation": (adapted, lambda: adaptation_loss(adapted.forward(x), yl)),
        "branch": (model, lambda: branch_loss(model.forward(x), y, mem)),
        "branch+LA": (model, lambda: branch_loss(model.forward(x), y, mem, prior)),
        "fusion": (model, lambda: fusion_loss(model.forward(x), y)),
        "fusion+LA": (model, lambda: fusion_loss(model.forward(x), y, prior)),
        "distill": (model, lambda: distill_loss(model.forward(x), p_old, p_new, T)),
    }

    def overall():
        out = model.forward(x)
        return overall_loss(w, fusion_loss(out, y, prior), branch_loss(out, y, mem, prior), distill_loss(out, p_old, p_new, T))

    cases["overall+LA"] = (model, overall)
    return cases


def check_gradients(seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for name, (model, fn) in _loss_cases(rng).items():
        for p in model.parameters():
            for q in model.parameters():
                q.grad = None
            with GradTape() as tape:
                loss = fn()
            backward(loss, tape)
            num = numerical_grad(lambda: fn().item(), p)
            denom = max(np.max(np.abs(num)), np.max(np.abs(p.grad)), 1e-12)
            err = float(np.max(np.abs(num - p.grad)) / denom)
            if err > worst:
                worst, where = err, name
    return worst < 1e-4, f"max relative error {worst:.2e} ({where})"


def check_memory_budget(seed: int = 2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    budget, mem, next_class = 53, RehearsalMemory("fixed_total", 53), 0
    for t in range(10):
        k = int(rng.integers(1, 4))
        classes = tuple(range(next_class, next_class + k))
        next_class += k
        train = tuple(Sample(rng.normal(size=3), c) for c in classes for _ in range(int(rng.integers(20, 40))))
        mem = update_memory(mem, TaskSpec(t + 1, classes, train, ()), lambda X: X)
        counts = list(mem.counts().values())
        if len(mem) > budget or max(counts) - min(counts) > 1:
            return False, f"task {t + 1}: {len(mem)} stored, counts {counts}"
    return True, f"{len(mem)} stored for {next_class} classes"


def check_logit_adjustment() -> tuple[bool, str]:
    g = ClassPrior((900, 100), (1, 1), tro=1.0).gamma
    exact = g[0] == math.log(0.9) and g[1] == math.log(0.1)
    zero = not np.any(ClassPrior((900, 100), (1, 1), tro=0.0).gamma)
    return exact and zero, f"gamma {g.tolist()}"


def check_teacher_probs() -> tuple[bool, str]:
    p = teacher_probs(np.array([[1.0, 2.0, 3.0]]), 1.0)
    ok = abs(p.sum() - 1.0) < 1e-15 and abs(p[0, 2] - 0.66524095577482188953) < 1e-15
    return ok, f"softmax [1,2,3] = {p[0].tolist()}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("merge identity", check_merge_identity),
    ("loss gradients", check_gradients),
    ("memory budget", check_memory_budget),
    ("logit adjustment", check_logit_adjustment),
    ("softmax reference", check_teacher_probs),
]


def run_selftest(echo: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
