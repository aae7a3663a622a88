"""Small reverse-mode autodiff kernel over float64 numpy arrays.

Only what the toy backbones and internal classifiers need: dense layers,
ReLU, softmax, the two cross-entropy entry points, the distillation loss,
Adam and a step learning-rate schedule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``requires_grad`` marks leaves that should receive gradients; frozen
    parameters simply have it switched off.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # arithmetic, enough for arbitrary small compositions in tests
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def relu(self) -> "Tensor":
        return relu(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), "add", backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)

        def backward_scalar(g):
            return (g * c,)

        return _make(a.data * c, (a,), "mul", backward_scalar)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: expected [n, m] @ [m, p], got {a.shape} @ {b.shape}")

    def backward(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def dense_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = xW + b for x [batch, in], W [in, out], b [out]."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense: input must be [batch, in_dim], got shape {x.shape}")
    if W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"dense: expected in_dim {W.shape[0] if W.data.ndim == 2 else '?'}, got {x.shape[1]}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"dense: expected bias shape ({W.shape[1]},), got {b.shape}")

    def backward(g):
        return (g @ W.data.T, x.data.T @ g, g.sum(axis=0))

    return _make(x.data @ W.data + b.data, (x, W, b), "dense", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), "relu", backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _make(y, (x,), "exp", backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _make(np.log(x.data), (x,), "log", backward)


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.array(x.data.sum()), (x,), "sum", backward)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(np.array(x.data.mean()), (x,), "mean", backward)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim == 0 or logits.shape[-1] < 1:
        raise ShapeError(f"softmax needs k >= 1 classes, got shape {logits.shape}")
    p = _softmax_rows(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), "softmax", backward)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    return _softmax_rows(np.asarray(logits, dtype=np.float64))


def _check_labels(labels, batch: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ShapeError(f"labels: expected shape ({batch},), got {labels.shape}")
    if batch and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [batch, k], got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    logp = _log_softmax_rows(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _make(np.array(loss), (logits,), "cross_entropy", backward)


def cross_entropy_probs(probs: Tensor, labels) -> tuple[Tensor, int]:
    """Mean -log p(true) for already-normalised probabilities.

    Probabilities at or below ``PROB_FLOOR`` are clamped; the number of clamped
    samples is returned alongside the loss.
    """
    if probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy_probs: probs must be [batch, k], got {probs.shape}")
    n, k = probs.shape
    labels = _check_labels(labels, n, k)
    rows = np.arange(n)
    p_true = probs.data[rows, labels]
    clamped = p_true <= PROB_FLOOR
    safe = np.where(clamped, PROB_FLOOR, p_true)
    loss = -np.log(safe).mean()

    def backward(g):
        grad = np.zeros_like(probs.data)
        grad[rows, labels] = np.where(clamped, 0.0, -1.0 / safe) * (g / n)
        return (grad,)

    return _make(np.array(loss), (probs,), "cross_entropy_probs", backward), int(clamped.sum())


def kd_loss(student_logits: Tensor, teacher_logits, temperature: float = 1.0) -> Tensor:
    """T^2 * mean_batch KL(softmax(teacher/T) || softmax(student/T)).

    The teacher is treated as a constant; no gradient reaches it.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if t_logits.shape != student_logits.shape or student_logits.data.ndim != 2:
        raise ShapeError(f"kd_loss: student {student_logits.shape} vs teacher {t_logits.shape}")
    T = float(temperature)
    n = student_logits.shape[0]
    log_pt = _log_softmax_rows(t_logits / T)
    log_ps = _log_softmax_rows(student_logits.data / T)
    pt = np.exp(log_pt)
    kl = (pt * (log_pt - log_ps)).sum(axis=-1)
    # identical rows give exactly zero; guard tiny negative round-off
    loss = max(T * T * kl.mean(), 0.0)

    def backward(g):
        ps = np.exp(log_ps)
        return ((ps - pt) * (g * T / n),)

    return _make(np.array(loss), (student_logits,), "kd_loss", backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``.

    A graph can be walked once; building a new forward pass resets it.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass first")
    loss._consumed = True
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            # leaf parameter
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    eps: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset_moments(self) -> None:
        self.step_count = 0
        self.m.clear()
        self.v.clear()


def adam_step(state: AdamState, params: Mapping[str, Tensor]) -> None:
    """One Adam update with L2 weight decay folded into the gradient.

    Parameters that are frozen or received no gradient are left untouched.
    Gradients are cleared afterwards.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None


def lr_schedule(base_lr: float, epoch: int, milestones: Sequence[int], gamma: float = 0.1) -> float:
    """Step decay: base_lr * gamma ** (number of milestones <= epoch)."""
    if list(milestones) != sorted(milestones):
        raise ValueError(f"milestones must be sorted ascending, got {list(milestones)}")
    passed = sum(1 for m in milestones if m <= epoch)
    return base_lr * gamma**passed


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def numeric_grad(f: Callable[[], float], p: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``p``."""
    out = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def is_finite(t: Tensor) -> bool:
    return bool(np.isfinite(t.data).all())


__all__ = [
    "AdamState",
    "GraphError",
    "PROB_FLOOR",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "cross_entropy",
    "cross_entropy_probs",
    "dense_forward",
    "exp",
    "is_finite",
    "kd_loss",
    "log",
    "lr_schedule",
    "matmul",
    "mul",
    "numeric_grad",
    "relu",
    "softmax",
    "softmax_np",
    "topological_order",
    "tmean",
    "tsum",
]
