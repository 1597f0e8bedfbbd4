"""Dense float64 tensors with a reverse-mode gradient tape, plus momentum SGD.

Everything the models and losses need lives here: affine maps, rectifiers,
concatenation, column slicing, softmax, cross-entropy and KL divergence.
Arrays are numpy float64; a tensor participates in differentiation when it
(or one of its ancestors) has ``requires_grad`` set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_ACTIVE_TAPES: list["GradTape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    output: Tensor
    inputs: tuple[Tensor, ...]


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager around a forward pass; every op whose inputs
    need gradients is appended in execution order, which is already a
    topological order.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = rule
        for tape in _ACTIVE_TAPES:
            tape.nodes.append(TapeNode(out, out._parents))
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: GradTape | None = None) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    With a tape, nodes are replayed in reverse recording order; without one
    the graph is sorted from ``loss``. Intermediate grads are released.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    if tape is not None:
        outputs = [n.output for n in tape.nodes]
        if not outputs or all(o is not loss for o in outputs):
            raise ContractError("loss was not recorded on this tape")
    else:
        outputs = [t for t in _topological(loss) if t._backward is not None]

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out in reversed(outputs):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        out._backward(g, pending)


def _push(pending: dict, t: Tensor, g: np.ndarray) -> None:
    """Route a gradient either to a leaf's .grad or to the pending map."""
    if not t.requires_grad:
        return
    if t._backward is None:
        _accumulate(t, g)
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    key = id(t)
    if key in pending:
        pending[key] = pending[key] + g
    else:
        pending[key] = g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g, pending):
        _push(pending, a, g)
        _push(pending, b, g)

    return _make(a.data + b.data, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    def rule(g, pending):
        _push(pending, a, -g)

    return _make(-a.data, (a,), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g, pending):
        _push(pending, a, g * b.data)
        _push(pending, b, g * a.data)

    return _make(a.data * b.data, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    def rule(g, pending):
        _push(pending, a, g * c)

    return _make(a.data * c, (a,), rule)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def rule(g, pending):
        _push(pending, a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    def rule(g, pending):
        _push(pending, a, np.broadcast_to(g, a.data.shape).copy())

    return _make(np.array(a.data.sum()), (a,), rule)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def rule(g, pending):
        _push(pending, a, np.full(a.data.shape, float(g) / n))

    return _make(np.array(a.data.mean()), (a,), rule)


# -------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def rule(g, pending):
        if a.requires_grad:
            _push(pending, a, g @ b.data.T)
        if b.requires_grad:
            _push(pending, b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    def rule(g, pending):
        _push(pending, a, g.T)

    return _make(a.data.T, (a,), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T (+ bias), the layout used by every layer in the model."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {weight.shape}")
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def rule(g, pending):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _push(pending, p, g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, rule)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]`` along the last axis."""

    def rule(g, pending):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _push(pending, a, full)

    return _make(a.data[..., start:stop].copy(), (a,), rule)


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def rule(g, pending):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _push(pending, a, full)

    return _make(a.data[idx].copy(), (a,), rule)


# -------------------------------------------------------------- probability

def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite value in logits")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    logits = as_tensor(logits)
    if logits.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    p = softmax_array(logits.data)

    def rule(g, pending):
        _push(pending, logits, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (logits,), rule)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows.

    A 1-D ``logits`` with an integer label is treated as a batch of one.
    """
    logits = as_tensor(logits)
    z = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} rows of logits but {y.shape[0]} labels")
    n_cls = z.shape[1]
    if np.any(y < 0) or np.any(y >= n_cls):
        raise IndexError(f"label out of range for {n_cls} classes")
    _check_finite(z)
    logp = _log_softmax(z)
    rows = np.arange(z.shape[0])
    value = -logp[rows, y].mean()

    def rule(g, pending):
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        grad *= float(g) / z.shape[0]
        _push(pending, logits, grad.reshape(logits.data.shape))

    return _make(np.array(value), (logits,), rule)


def kl_divergence(p_teacher, logits_student: Tensor, temperature: float = 1.0) -> Tensor:
    """Mean over rows of KL(p_teacher || softmax(logits_student / T)).

    Teacher probabilities are treated as constants.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(p_teacher.data if isinstance(p_teacher, Tensor) else p_teacher, dtype=np.float64)
    logits_student = as_tensor(logits_student)
    z = logits_student.data
    if p.shape != z.shape:
        raise ShapeError(f"teacher {p.shape} vs student {z.shape}")
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("teacher distribution is not normalized")
    _check_finite(z)
    p2 = p if p.ndim == 2 else p[None, :]
    z2 = z if z.ndim == 2 else z[None, :]
    logq = _log_softmax(z2 / temperature)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(p2 > 0, np.log(np.where(p2 > 0, p2, 1.0)), 0.0)
    value = (p2 * (logp - logq)).sum(axis=-1).mean()
    n = p2.shape[0]

    def rule(g, pending):
        grad = (np.exp(logq) - p2) * (float(g) / (n * temperature))
        _push(pending, logits_student, grad.reshape(z.shape))

    return _make(np.array(value), (logits_student,), rule)


# ---------------------------------------------------------------- optimizer

def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Cosine annealing from base_lr at epoch 0 to 0 at epoch total_epochs."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    e = min(max(epoch, 0), total_epochs)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * e / total_epochs))


@dataclass
class SgdState:
    base_lr: float = 0.1
    momentum: float = 0.9
    total_epochs: int = 1
    epoch: int = 0
    weight_decay: float = 0.0
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def learning_rate(self) -> float:
        return cosine_lr(self.epoch, self.total_epochs, self.base_lr)


def sgd_step(params: Iterable[Tensor], state: SgdState, grads: Sequence[np.ndarray] | None = None) -> None:
    """One classic-momentum step: v <- mu*v + g ; p <- p - lr*v.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient (frozen or unused) are left untouched.
    """
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeError("params and grads differ in length")
    lr = state.learning_rate
    for p, g in zip(params, grads):
        if g is None or not p.requires_grad:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"grad {g.shape} vs param {p.data.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(id(p))
        if v is None:
            v = np.array(g, dtype=np.float64, copy=True)
        else:
            if v.shape != g.shape:
                raise ShapeError("velocity shape drifted from parameter")
            v = state.momentum * v + g
        state.velocity[id(p)] = v
        p.data = p.data - lr * v


def numerical_grad(fn: Callable[[], float], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out
