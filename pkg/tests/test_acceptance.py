"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a ``criterion N: PASS|FAIL`` line that the conftest hook
prints at the end of the run. Run alone with

    pytest tests/test_acceptance.py -v

Criterion 10 needs MNIST as label-first CSV; point DRCIL_MNIST_TRAIN (and
optionally DRCIL_MNIST_TEST) at the files or place them under data/.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from helpers import ACCEPTANCE_LINES

from drcil.datastream import Sample, TaskSpec, make_synthetic_gaussians, split_b0, synthetic_benchmark
from drcil.evalcli.cli import main as cli_main
from drcil.evalcli.config import parse_config
from drcil.losses import ClassPrior, LossWeights, adaptation_loss, branch_loss, distill_loss, fusion_loss, overall_loss
from drcil.memory import RehearsalMemory, imbalance_ratio, select_exemplars, update_memory
from drcil.model import DrcModel, compute_branch_logits, expand_for_task
from drcil.numcore import GradTape, Tensor, backward, numerical_grad
from drcil.pipelines import PipelineConfig, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


def random_drc(rng, d, tasks, in_dim=5, hidden=7):
    model = DrcModel.create([in_dim, hidden, d], tasks[0], rng)
    for n in tasks[1:]:
        model.new_branch.weight.data += rng.normal(0, 0.3, (d, d))
        model = expand_for_task(model, n, rng)
    model.new_branch.weight.data += rng.normal(0, 0.3, (d, d))
    for h in model.heads:
        h.bias.data += rng.normal(size=h.bias.shape)
    return model


# ------------------------------------------------------------------ 1

def test_criterion_01_merge_consistency():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        d = (4, 16, 64)[i % 3]
        n_tasks = 1 + i % 6  # previous model holds 1..6 tasks
        tasks = tuple(int(k) for k in rng.integers(1, 5, size=n_tasks))
        prev = random_drc(rng, d, tasks)
        nxt = expand_for_task(prev, int(rng.integers(1, 5)), rng)
        f = Tensor(rng.normal(size=(8, d)) * 2.0)
        want = prev.forward_from_features(f).fused.data
        got = compute_branch_logits(nxt, f=f).old_prev.data
        worst = max(worst, float(np.max(np.abs(want - got))))
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-10 and elapsed < 5.0, f"max |diff| {worst:.2e} (<= 1e-10), {elapsed:.2f}s (< 5s)")


# ------------------------------------------------------------------ 2

def _grad_cases(rng):
    model = random_drc(rng, 4, (2, 3, 2))
    x = Tensor(rng.normal(size=(7, 5)))
    y = np.array([0, 1, 2, 3, 4, 5, 6])
    mem = np.array([0, 2, 3])
    n_prev = model.n_prev
    p_old = rng.dirichlet(np.ones(n_prev), size=7)
    p_new = rng.dirichlet(np.ones(2), size=7)
    prior = ClassPrior((300, 20, 12), (2, 3, 2), tro=1.2)
    adapted = DrcModel(model.extractor, [model.heads[-1]], model.new_branch, model.old_branch)
    y_local = np.array([0, 1, 1, 0, 1, 0, 0])
    w = LossWeights()

    def overall(pr):
        def fn():
            out = model.forward(x)
            return overall_loss(w, fusion_loss(out, y, pr), branch_loss(out, y, mem, pr), distill_loss(out, p_old, p_new, 2.0))
        return fn

    return [
        ("adaptation", adapted, lambda: adaptation_loss(adapted.forward(x), y_local)),
        ("branch", model, lambda: branch_loss(model.forward(x), y, mem)),
        ("branch+LA", model, lambda: branch_loss(model.forward(x), y, mem, prior)),
        ("fusion", model, lambda: fusion_loss(model.forward(x), y)),
        ("fusion+LA", model, lambda: fusion_loss(model.forward(x), y, prior)),
        ("distill", model, lambda: distill_loss(model.forward(x), p_old, p_new, 2.0)),
        ("overall", model, overall(None)),
        ("overall+LA", model, overall(prior)),
    ]


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    worst, where, checked = 0.0, "", 0
    for seed in range(3):
        for name, model, fn in _grad_cases(np.random.default_rng(seed)):
            for p in model.parameters():
                for q in model.parameters():
                    q.grad = None
                with GradTape() as tape:
                    loss = fn()
                backward(loss, tape)
                num = numerical_grad(lambda: fn().item(), p, eps=1e-5)
                denom = max(np.max(np.abs(num)), np.max(np.abs(p.grad)), 1e-12)
                err = float(np.max(np.abs(num - p.grad)) / denom)
                checked += 1
                if err > worst:
                    worst, where = err, name
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    record(2, ok, f"{checked} parameter checks, max rel err {worst:.2e} in {where} (< 1e-4), {elapsed:.1f}s (< 30s)")


# ------------------------------------------------------------------ 3

def _brute_herding(points, k):
    n, d = len(points), len(points[0])
    mu = [sum(p[j] for p in points) / n for j in range(d)]
    chosen = []
    for step in range(1, k + 1):
        best, best_dist = None, math.inf
        for i in range(n):
            if i in chosen:
                continue
            members = [points[c] for c in chosen] + [points[i]]
            dist = math.sqrt(sum((mu[j] - sum(m[j] for m in members) / step) ** 2 for j in range(d)))
            if dist < best_dist:
                best, best_dist = i, dist
        chosen.append(best)
    return chosen


def test_criterion_03_memory_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    problems = []
    budget = 150
    mem = RehearsalMemory("fixed_total", budget)
    next_class = 0
    for t in range(10):
        k = int(rng.integers(1, 5))
        classes = tuple(range(next_class, next_class + k))
        next_class += k
        # every class can fill any quota, so counts stay within one of each other
        train = tuple(Sample(rng.normal(size=4), c) for c in classes for _ in range(int(rng.integers(budget, budget + 60))))
        mem = update_memory(mem, TaskSpec(t + 1, classes, train, ()), lambda X: X)
        counts = [sum(1 for s in mem.samples() if s.label == c) for c in range(next_class)]
        if sum(counts) > budget:
            problems.append(f"task {t + 1}: {sum(counts)} > {budget}")
        if max(counts) - min(counts) > 1:
            problems.append(f"task {t + 1}: counts spread {min(counts)}..{max(counts)}")

    prefix_cases = 0
    for trial in range(40):
        n = int(rng.integers(2, 9))
        pts = rng.normal(size=(n, 3)).tolist()
        samples = [Sample(np.array(p), 0) for p in pts]
        oracle = _brute_herding(pts, n)
        for q in range(n + 1):
            got = [samples.index(s) for s in select_exemplars(samples, q, lambda X: X)]
            prefix_cases += 1
            if got != oracle[:q]:
                problems.append(f"herding trial {trial}, q={q}: {got} != {oracle[:q]}")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 10.0
    detail = problems[0] if problems else f"budget {budget} held over 10 tasks, {prefix_cases} prefix cases match oracle"
    record(3, ok, f"{detail}, {elapsed:.2f}s (< 10s)")


# ------------------------------------------------------------------ 4

def test_criterion_04_dynamic_imbalance():
    data = make_synthetic_gaussians(20, 100, 8, 1.0, seed=4)
    stream = split_b0(data, 20, 10, seed=4)
    proj = np.random.default_rng(4).normal(size=(8, 5))
    mem = RehearsalMemory("fixed_total", 200)
    ratios = []
    for task in stream.tasks:
        if len(mem):
            ratios.append(imbalance_ratio(task, mem))
        mem = update_memory(mem, task, lambda X: np.maximum(X @ proj, 0.0))
    ok = len(ratios) == 9 and all(b >= a for a, b in zip(ratios, ratios[1:]))
    record(4, ok, "ratios " + " ".join(f"{r:.2f}" for r in ratios) + " nondecreasing")


# ------------------------------------------------------------------ 5

# Pre-build oracle run (same stream and config, seeds 0..4): task-1 accuracy
# after task 5 was 0.0 on every seed, task-5 accuracy 0.9625 to 1.0.
FORGET_TASK1_MAX = 0.20
FORGET_TASK5_MIN = 0.90


def test_criterion_05_forgetting():
    t0 = time.perf_counter()
    first, last = [], []
    for seed in range(5):
        data = make_synthetic_gaussians(10, 200, 20, 1.0, seed=seed)
        stream = split_b0(data, 10, 5, seed)
        cfg = PipelineConfig.desk(
            kind="MDT", drc_enabled=False, memory_size=0, adaptation_epochs=10, fusion_epochs=20,
            loss=LossWeights(beta=0.0), seed=seed,
        )
        final = run_experiment(stream, cfg).steps[-1].per_task_accuracy
        first.append(final[1])
        last.append(final[5])
    elapsed = time.perf_counter() - t0
    ok = max(first) <= FORGET_TASK1_MAX and min(last) >= FORGET_TASK5_MIN and elapsed < 120
    record(5, ok, f"task-1 acc {first} (<= 0.2), task-5 acc {[round(a, 3) for a in last]} (>= 0.9), {elapsed:.1f}s (< 120s)")


# ------------------------------------------------------------------ 6

DIRECTION_SEEDS = range(5)


def _avg(kind, drc, seed):
    cfg = PipelineConfig.desk(kind=kind, drc_enabled=drc, memory_policy="per_class", memory_size=20, seed=seed)
    return run_experiment(synthetic_benchmark(seed), cfg).avg_accuracy


@pytest.mark.slow
def test_criterion_06_drc_direction():
    t0 = time.perf_counter()
    lines, ok = [], True
    for kind in ("MAF", "MDT"):
        diffs = [_avg(kind, True, s) - _avg(kind, False, s) for s in DIRECTION_SEEDS]
        positive = sum(d > 0 for d in diffs)
        good = float(np.mean(diffs)) > 0 and positive >= 4
        ok &= good
        lines.append(f"{kind}: mean dAvg {100 * np.mean(diffs):+.2f} pts, {positive}/5 seeds positive")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600
    record(6, ok, "; ".join(lines) + f", {elapsed:.0f}s (< 600s)")


# ------------------------------------------------------------------ 7

def test_criterion_07_single_task_degeneracy():
    data = make_synthetic_gaussians(5, 80, 10, 1.0, seed=7)
    stream = split_b0(data, 5, 1, seed=7)
    results = {k: run_experiment(stream, PipelineConfig.desk(kind=k, seed=7)) for k in ("MDT", "MEC", "MAF")}
    metrics = {k: r.metrics() for k, r in results.items()}
    ok = metrics["MDT"] == metrics["MEC"] == metrics["MAF"]
    record(7, ok, f"Last {results['MDT'].last_accuracy:.4f} identical across MDT/MEC/MAF: {ok}")


# ------------------------------------------------------------------ 8

def test_criterion_08_logit_adjustment():
    rng = np.random.default_rng(8)
    model = random_drc(rng, 4, (3, 2))
    out = model.forward(Tensor(rng.normal(size=(6, 5))))
    y = np.array([0, 1, 2, 3, 4, 1])
    zero = ClassPrior((900, 100), (3, 2), tro=0.0)
    diffs = [
        abs(fusion_loss(out, y, zero).item() - fusion_loss(out, y).item()),
        abs(branch_loss(out, y, [0, 1], zero).item() - branch_loss(out, y, [0, 1]).item()),
    ]
    gamma_zero = not np.any(zero.gamma)
    g = ClassPrior((900, 100), (3, 2), tro=1.0).gamma
    exact = list(g) == [math.log(0.9)] * 3 + [math.log(0.1)] * 2
    ok = gamma_zero and max(diffs) <= 1e-12 and exact
    record(8, ok, f"tro=0: gamma zero {gamma_zero}, loss diff {max(diffs):.1e} (<= 1e-12); tro=1: gamma {g[0]:.6f}, {g[-1]:.6f} exact {exact}")


# ------------------------------------------------------------------ 9

def test_criterion_09_determinism(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "dataset.n_classes = 6\ndataset.per_class = 80\ndataset.dim = 8\nprotocol.steps = 3\n"
        "pipeline.kind = MAF\npipeline.adaptation_epochs = 4\npipeline.fusion_epochs = 8\n"
    )
    codes = [cli_main(["run", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / d)]) for d in ("a", "b")]
    a = (tmp_path / "a" / "results.jsonl").read_bytes()
    b = (tmp_path / "b" / "results.jsonl").read_bytes()
    ok = codes == [0, 0] and a == b and json.loads(a)["seed"] == 7
    record(9, ok, f"exit codes {codes}, records byte-identical: {a == b} ({len(a)} bytes)")


# ------------------------------------------------------------------ 10

def _mnist_paths():
    train = Path(os.environ.get("DRCIL_MNIST_TRAIN", ROOT / "data" / "mnist_train.csv"))
    test = Path(os.environ.get("DRCIL_MNIST_TEST", ROOT / "data" / "mnist_test.csv"))
    return train, (test if test.exists() else None)


# No oracle run was possible without the dataset; 0.80 is the stated bar.
MNIST_LAST_MIN = 0.80


@pytest.mark.slow
def test_criterion_10_mnist_smoke(tmp_path):
    train, test = _mnist_paths()
    if not train.exists():
        ACCEPTANCE_LINES.append(f"criterion 10: SKIP  MNIST CSV not found at {train}")
        pytest.skip(f"MNIST CSV not found at {train}")
    t0 = time.perf_counter()
    lasts = []
    for seed in range(3):
        overrides = [f"dataset.path={train}", f"seed={seed}"]
        if test is not None:
            overrides.append(f"dataset.test_path={test}")
        cfg = parse_config(ROOT / "configs" / "mnist_b0_5steps.cfg").with_overrides(overrides)
        result = run_experiment(cfg.build_stream(seed), cfg.pipeline_config(seed))
        lasts.append(result.last_accuracy)
    elapsed = time.perf_counter() - t0
    mean_last = float(np.mean(lasts))
    ok = mean_last >= MNIST_LAST_MIN and elapsed < 900
    record(10, ok, f"MAFDRC Last {[round(a, 4) for a in lasts]}, mean {mean_last:.4f} (>= 0.80), {elapsed:.0f}s (< 900s)")
