"""Incremental classifier with a dynamic residual head.

Layout per task t: an MLP extractor producing a d-dim feature, a frozen
merged branch (t >= 2), a trainable branch, and one affine head per task.
The two branch paths run through the same heads and their logits are
averaged. Because branches are bias-free linear maps and heads are affine,
averaging two branch matrices gives the same old-class logits as averaging
the logits they produce; ``merge_branches`` relies on that.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import ShapeError, Tensor, columns, concat, linear, relu, scale, add

CHECKPOINT_VERSION = 1


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- layers

@dataclass
class FeatureExtractor:
    """Rectified MLP; the last layer is left linear and emits the feature."""

    weights: list[Tensor]
    biases: list[Tensor]
    frozen: bool = False

    @classmethod
    def create(cls, widths: Sequence[int], rng: np.random.Generator) -> "FeatureExtractor":
        if len(widths) < 2:
            raise ValueError("extractor needs at least input and output widths")
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            ws.append(Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_out, fan_in)), requires_grad=True))
            bs.append(Tensor(np.zeros(fan_out), requires_grad=True))
        return cls(ws, bs)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input width {x.shape[-1]} != extractor width {self.in_dim}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = linear(h, w, b)
            if i < last:
                h = relu(h)
        return h

    def parameters(self) -> list[Tensor]:
        return [] if self.frozen else [*self.weights, *self.biases]

    def freeze(self) -> None:
        self.frozen = True
        for p in (*self.weights, *self.biases):
            p.requires_grad = False
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in (*self.weights, *self.biases))


@dataclass
class DualExtractor:
    """Frozen old extractor side by side with a trainable new one (width 2d)."""

    old: FeatureExtractor
    new: FeatureExtractor

    @property
    def in_dim(self) -> int:
        return self.new.in_dim

    @property
    def out_dim(self) -> int:
        return self.old.out_dim + self.new.out_dim

    def forward(self, x: Tensor) -> Tensor:
        return concat([self.old.forward(x), self.new.forward(x)], axis=1)

    def parameters(self) -> list[Tensor]:
        return self.old.parameters() + self.new.parameters()

    def param_count(self) -> int:
        return self.old.param_count() + self.new.param_count()


@dataclass
class BranchLayer:
    weight: Tensor
    frozen: bool = False

    @classmethod
    def create(cls, d: int, init: str, rng: np.random.Generator) -> "BranchLayer":
        if init == "identity":
            w = np.eye(d) + rng.normal(0.0, 0.01, (d, d))
        elif init == "random":
            w = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
        else:
            raise ValueError(f"unknown branch init {init!r}")
        return cls(Tensor(w, requires_grad=True))

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, f: Tensor) -> Tensor:
        return linear(f, self.weight)

    def freeze(self) -> "BranchLayer":
        self.frozen = True
        self.weight.requires_grad = False
        self.weight.grad = None
        return self

    def parameters(self) -> list[Tensor]:
        return [] if self.frozen else [self.weight]


@dataclass
class TaskHead:
    weight: Tensor
    bias: Tensor
    task_index: int

    @classmethod
    def create(cls, n_classes: int, d: int, task_index: int, rng: np.random.Generator) -> "TaskHead":
        return cls(
            Tensor(_uniform(rng, (n_classes, d), d), requires_grad=True),
            Tensor(np.zeros(n_classes), requires_grad=True),
            task_index,
        )

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


def apply_heads(heads: Sequence[TaskHead], b: Tensor) -> Tensor:
    """Concatenated logits [h_1(b), ..., h_k(b)] as one affine map."""
    if not heads:
        raise ValueError("no heads")
    w = concat([h.weight for h in heads], axis=0)
    bias = concat([h.bias for h in heads], axis=0)
    return linear(b, w, bias)


# ---------------------------------------------------------------- outputs

@dataclass
class BranchLogits:
    """The four logit blocks of a two-branch forward pass.

    ``old_*`` are produced by the frozen branch path, ``new_*`` by the
    trainable branch; ``*_prev`` cover the heads of earlier tasks and
    ``*_cur`` the current task's head.
    """

    old_prev: Tensor
    old_cur: Tensor
    new_prev: Tensor
    new_cur: Tensor


@dataclass
class Fused:
    full: Tensor
    prev: Tensor | None
    cur: Tensor


@dataclass
class ModelOutput:
    features: Tensor
    logits: Tensor  # trainable-branch (or plain) logits over all seen classes
    old_logits: Tensor | None  # frozen-branch logits, None when there is one path
    fused: Tensor
    n_prev: int  # number of classes belonging to earlier tasks

    def fused_blocks(self) -> tuple[Tensor | None, Tensor]:
        n = self.fused.shape[-1]
        prev = columns(self.fused, 0, self.n_prev) if self.n_prev else None
        return prev, columns(self.fused, self.n_prev, n)


def rc_average_old(outputs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of the frozen branches' outputs."""
    if not outputs:
        raise ValueError("rc_average_old needs at least one branch output")
    total = outputs[0]
    for o in outputs[1:]:
        if o.shape != total.shape:
            raise ShapeError("branch outputs differ in shape")
        total = add(total, o)
    return scale(total, 1.0 / len(outputs))


def residual_fuse(logits: Tensor, old_logits: Tensor, n_prev: int = 0) -> Fused:
    if logits.shape != old_logits.shape:
        raise ShapeError(f"cannot fuse {logits.shape} with {old_logits.shape}")
    full = scale(add(logits, old_logits), 0.5)
    n = full.shape[-1]
    prev = columns(full, 0, n_prev) if n_prev else None
    return Fused(full, prev, columns(full, n_prev, n))


def split_blocks(logits: Tensor, old_logits: Tensor, n_prev: int) -> BranchLogits:
    n = logits.shape[-1]
    return BranchLogits(
        old_prev=columns(old_logits, 0, n_prev),
        old_cur=columns(old_logits, n_prev, n),
        new_prev=columns(logits, 0, n_prev),
        new_cur=columns(logits, n_prev, n),
    )


# ---------------------------------------------------------------- models

@dataclass
class DrcModel:
    """Extractor + (merged frozen branch, trainable branch) + per-task heads.

    With ``use_branches=False`` it is a plain multi-head classifier on f.
    """

    extractor: FeatureExtractor | DualExtractor
    heads: list[TaskHead]
    new_branch: BranchLayer | None = None
    old_branch: BranchLayer | None = None
    use_branches: bool = True
    notes: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        widths: Sequence[int],
        n_classes: int,
        rng: np.random.Generator,
        use_branches: bool = True,
        branch_init: str = "identity",
    ) -> "DrcModel":
        extractor = FeatureExtractor.create(widths, rng)
        d = extractor.out_dim
        branch = BranchLayer.create(d, branch_init, rng) if use_branches else None
        head = TaskHead.create(n_classes, d, 1, rng)
        return cls(extractor, [head], new_branch=branch, use_branches=use_branches)

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    @property
    def feature_dim(self) -> int:
        return self.extractor.out_dim

    @property
    def class_counts(self) -> list[int]:
        return [h.n_classes for h in self.heads]

    @property
    def n_classes(self) -> int:
        return sum(self.class_counts)

    @property
    def n_prev(self) -> int:
        return self.n_classes - self.heads[-1].n_classes

    def branch_param_count(self) -> int:
        return sum(b.weight.size for b in (self.old_branch, self.new_branch) if b is not None)

    def parameters(self) -> list[Tensor]:
        params = list(self.extractor.parameters())
        if self.new_branch is not None:
            params += self.new_branch.parameters()
        if self.old_branch is not None:
            params += self.old_branch.parameters()
        for h in self.heads:
            params += [h.weight, h.bias]
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward_features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.extractor.forward(x)

    def forward(self, x) -> ModelOutput:
        f = self.forward_features(x)
        return self.forward_from_features(f)

    def forward_from_features(self, f: Tensor) -> ModelOutput:
        if not self.use_branches:
            logits = apply_heads(self.heads, f)
            return ModelOutput(f, logits, None, logits, self.n_prev)
        logits = apply_heads(self.heads, self.new_branch.forward(f))
        if self.old_branch is None:
            return ModelOutput(f, logits, None, logits, self.n_prev)
        old_logits = apply_heads(self.heads, self.old_branch.forward(f))
        fused = residual_fuse(logits, old_logits, self.n_prev)
        return ModelOutput(f, logits, old_logits, fused.full, self.n_prev)

    def clone(self) -> "DrcModel":
        twin = copy.deepcopy(self)
        for p in twin._all_tensors():
            p.grad = None
        return twin

    def frozen_copy(self) -> "DrcModel":
        """Read-only snapshot used as a teacher."""
        twin = self.clone()
        for p in twin._all_tensors():
            p.requires_grad = False
        return twin

    def trainable_copy(self) -> "DrcModel":
        """Clone with every non-frozen tensor re-enabled for gradients."""
        twin = self.clone()
        frozen = set()
        ex = twin.extractor
        for e in ([ex.old, ex.new] if isinstance(ex, DualExtractor) else [ex]):
            if e.frozen:
                frozen.update(id(p) for p in (*e.weights, *e.biases))
        for b in (twin.old_branch, twin.new_branch):
            if b is not None and b.frozen:
                frozen.add(id(b.weight))
        for p in twin._all_tensors():
            p.requires_grad = id(p) not in frozen
        return twin

    def _all_tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        ex = self.extractor
        for e in ([ex.old, ex.new] if isinstance(ex, DualExtractor) else [ex]):
            out += [*e.weights, *e.biases]
        for b in (self.old_branch, self.new_branch):
            if b is not None:
                out.append(b.weight)
        for h in self.heads:
            out += [h.weight, h.bias]
        return out


@dataclass
class RcModel:
    """Reference residual classifier that keeps every task's branch."""

    extractor: FeatureExtractor
    branches: list[BranchLayer]
    heads: list[TaskHead]

    @property
    def n_prev(self) -> int:
        return sum(h.n_classes for h in self.heads[:-1])

    def branch_param_count(self) -> int:
        return sum(b.weight.size for b in self.branches)

    def forward(self, x) -> ModelOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.forward_from_features(self.extractor.forward(x))

    def forward_from_features(self, f: Tensor) -> ModelOutput:
        logits = apply_heads(self.heads, self.branches[-1].forward(f))
        if len(self.branches) == 1:
            return ModelOutput(f, logits, None, logits, self.n_prev)
        b_bar = rc_average_old([b.forward(f) for b in self.branches[:-1]])
        old_logits = apply_heads(self.heads, b_bar)
        fused = residual_fuse(logits, old_logits, self.n_prev)
        return ModelOutput(f, logits, old_logits, fused.full, self.n_prev)

    def expand(self, n_new: int, rng: np.random.Generator, branch_init: str = "identity") -> "RcModel":
        twin = copy.deepcopy(self)
        for b in twin.branches:
            b.freeze()
        d = twin.extractor.out_dim
        twin.branches.append(BranchLayer.create(d, branch_init, rng))
        twin.heads.append(TaskHead.create(n_new, d, len(twin.heads) + 1, rng))
        return twin


# ---------------------------------------------------------------- operations

def compute_branch_logits(model: DrcModel | RcModel, f: Tensor | None = None, x=None) -> BranchLogits:
    """The four logit blocks for old/new branch paths through old/new heads."""
    out = model.forward_from_features(f) if f is not None else model.forward(x)
    if out.old_logits is None:
        raise ValueError("branch logits need a model with two branch paths (t >= 2)")
    return split_blocks(out.logits, out.old_logits, out.n_prev)


def merge_branches(old: BranchLayer | None, recent: BranchLayer) -> BranchLayer:
    """Average two branch matrices in parameter space; result is frozen.

    ``old=None`` (the step from task 1 to task 2) copies ``recent``.
    """
    if old is None:
        w = recent.weight.data.copy()
    else:
        if old.weight.shape != recent.weight.shape:
            raise ShapeError(f"cannot merge {old.weight.shape} with {recent.weight.shape}")
        w = 0.5 * (recent.weight.data + old.weight.data)
    return BranchLayer(Tensor(w), frozen=True)


def expand_for_task(
    model: DrcModel,
    n_new_classes: int,
    rng: np.random.Generator,
    init_policy: str = "identity",
) -> DrcModel:
    """Next-task model: merged frozen branch, fresh trainable branch, new head.

    The input model is not modified.
    """
    if n_new_classes < 1:
        raise ValueError("a task needs at least one class")
    twin = model.clone()
    d = twin.feature_dim
    if twin.use_branches:
        twin.old_branch = merge_branches(model.old_branch, model.new_branch)
        twin.new_branch = BranchLayer.create(d, init_policy, rng)
    twin.heads.append(TaskHead.create(n_new_classes, d, twin.n_tasks + 1, rng))
    return twin


def predict(model, x) -> np.ndarray:
    """Column index of the largest fused logit (lowest index on ties).

    Softmax is monotone, so the argmax is taken on the logits directly.
    """
    out = model.forward(x)
    z = out.fused.data
    return np.argmax(z, axis=-1)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: DrcModel, path) -> None:
    ex = model.extractor
    if isinstance(ex, DualExtractor):
        raise ValueError("checkpoints hold compressed single-extractor models only")
    arrays = {}
    for i, (w, b) in enumerate(zip(ex.weights, ex.biases)):
        arrays[f"extractor.w{i}"] = w.data
        arrays[f"extractor.b{i}"] = b.data
    for name in ("old_branch", "new_branch"):
        br = getattr(model, name)
        if br is not None:
            arrays[f"{name}.w"] = br.weight.data
    for i, h in enumerate(model.heads):
        arrays[f"head{i}.w"] = h.weight.data
        arrays[f"head{i}.b"] = h.bias.data
    manifest = {
        "version": CHECKPOINT_VERSION,
        "task_count": model.n_tasks,
        "class_counts": model.class_counts,
        "layers": len(ex.weights),
        "use_branches": model.use_branches,
        "frozen": {
            "extractor": ex.frozen,
            "old_branch": model.old_branch.frozen if model.old_branch else None,
            "new_branch": model.new_branch.frozen if model.new_branch else None,
        },
        "notes": model.notes,
    }
    arrays["manifest"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with Path(path).open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> DrcModel:
    with np.load(Path(path)) as z:
        manifest = json.loads(bytes(z["manifest"]).decode())
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        frozen = manifest["frozen"]
        n_layers = manifest["layers"]
        ex = FeatureExtractor(
            [Tensor(z[f"extractor.w{i}"], requires_grad=True) for i in range(n_layers)],
            [Tensor(z[f"extractor.b{i}"], requires_grad=True) for i in range(n_layers)],
        )
        if frozen["extractor"]:
            ex.freeze()
        branches = {}
        for name in ("old_branch", "new_branch"):
            if f"{name}.w" in z:
                br = BranchLayer(Tensor(z[f"{name}.w"], requires_grad=True))
                if frozen[name]:
                    br.freeze()
                branches[name] = br
        heads = [
            TaskHead(Tensor(z[f"head{i}.w"], requires_grad=True), Tensor(z[f"head{i}.b"], requires_grad=True), i + 1)
            for i in range(manifest["task_count"])
        ]
    return DrcModel(
        ex,
        heads,
        new_branch=branches.get("new_branch"),
        old_branch=branches.get("old_branch"),
        use_branches=manifest["use_branches"],
        notes=manifest.get("notes", {}),
    )
