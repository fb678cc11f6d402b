"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its parents and a closure that maps the
output gradient back onto them.  ``Tensor.backward`` walks that tape in reverse
topological order.  Gradients accumulate into ``.grad`` until cleared with
``zero_grad``.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError, StateError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(t: "Tensor", g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: tuple, backward: Callable[[np.ndarray], None]) -> "Tensor":
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


class Tensor:
    """A float32 array that can take part in gradient recording.

    Leaf tensors with ``requires_grad=True`` are the trainable parameters; the
    optimizers only ever touch those.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def freeze(self) -> "Tensor":
        self.requires_grad = False
        self.grad = None
        return self

    def unfreeze(self) -> "Tensor":
        self.requires_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- backward --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise StateError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise StateError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        _accumulate(self, np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is not None:
                node._backward(node.grad)
            # release the tape so a graph can only be differentiated once
            node.grad = None
            node._parents = ()
            node._backward = None

    # -- elementwise arithmetic -----------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))

        return _make(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return _make(-a.data, (a,), lambda g: _accumulate(a, -g))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return self.scale(other)
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.shape))

        return _make(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return self.scale(1.0 / other)
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return _make(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        p = float(exponent)
        return _make(a.data ** p, (a,), lambda g: _accumulate(a, g * p * a.data ** (p - 1)))

    def scale(self, factor: float) -> "Tensor":
        a = self
        f = DTYPE(factor)
        return _make(a.data * f, (a,), lambda g: _accumulate(a, g * f))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- unary functions -------------------------------------------------
    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return _make(out, (a,), lambda g: _accumulate(a, g * out))

    def log(self) -> "Tensor":
        a = self
        return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))

    def sqrt(self) -> "Tensor":
        a = self
        out = np.sqrt(a.data)
        return _make(out, (a,), lambda g: _accumulate(a, g * 0.5 / out))

    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.data)
        return _make(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)))

    def gelu(self) -> "Tensor":
        """GELU, tanh approximation."""
        a = self
        x = a.data
        c = DTYPE(math.sqrt(2.0 / math.pi))
        inner = c * (x + DTYPE(0.044715) * x ** 3)
        t = np.tanh(inner)
        out = DTYPE(0.5) * x * (1.0 + t)

        def backward(g):
            dinner = c * (1.0 + DTYPE(3 * 0.044715) * x * x)
            _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

        return _make(out, (a,), backward)

    def softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

        return _make(out, (a,), backward)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        out = _log_softmax(a.data, axis)

        def backward(g):
            _accumulate(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

        return _make(out, (a,), backward)

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        axes = _normalize_axes(axis, a.ndim)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            _accumulate(a, np.broadcast_to(g, a.shape))

        return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[i] for i in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims).scale(1.0 / count)

    # -- shape manipulation ---------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            out = a.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} into {shape}") from exc
        return _make(out, (a,), lambda g: _accumulate(a, g.reshape(a.shape)))

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inverse = tuple(np.argsort(axes))
        return _make(a.data.transpose(axes), (a,), lambda g: _accumulate(a, g.transpose(inverse)))

    def transpose(self, axis0: int = -2, axis1: int = -1) -> "Tensor":
        """Swap two axes (the last two by default)."""
        a = self
        if a.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 dims, got {a.shape}")
        return _make(
            np.swapaxes(a.data, axis0, axis1), (a,), lambda g: _accumulate(a, np.swapaxes(g, axis0, axis1))
        )

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def broadcast_to(self, shape) -> "Tensor":
        a = self
        try:
            out = np.broadcast_to(a.data, tuple(shape))
        except ValueError as exc:
            raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}") from exc
        return _make(out, (a,), lambda g: _accumulate(a, _unbroadcast(g, a.shape)))

    def __getitem__(self, idx) -> "Tensor":
        a = self
        if isinstance(idx, Tensor):
            idx = idx.data.astype(np.int64)
        basic = _is_basic_index(idx)

        def backward(g):
            full = np.zeros(a.shape, dtype=DTYPE)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            _accumulate(a, full)

        return _make(a.data[idx], (a,), backward)


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# -- multi-input operations ----------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    if a.ndim == 1:
        return matmul(a.reshape(1, -1), b).reshape(b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return matmul(a, b.reshape(-1, 1)).reshape(a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: cannot batch shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            _accumulate(b, gb)

    return _make(out, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            _accumulate(t, piece)

    return _make(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [as_tensor(t).reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an affine map."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = (inv / n) * (
                n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, n).sum(axis=0))

    return _make(out.astype(DTYPE), (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    return x.gelu()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.softmax(axis)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup; gradients scatter-add back into the selected rows."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table of {table.shape[0]} rows")
    return table[idx]


def _check_targets(targets, classes: int, batch: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != batch:
        raise DimensionError(f"got {t.shape[0]} targets for a batch of {batch}")
    if t.size and (t.min() < 0 or t.max() >= classes):
        bad = t[(t < 0) | (t >= classes)][0]
        raise IndexError(f"target index {bad} out of range for {classes} classes")
    return t


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    if logits.ndim != 2:
        raise DimensionError(f"cross entropy expects [batch, classes] logits, got {logits.shape}")
    batch, classes = logits.shape
    t = _check_targets(targets, classes, batch)
    logp = _log_softmax(logits.data, axis=-1)
    rows = np.arange(batch)
    loss = -logp[rows, t].mean(dtype=np.float64)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, t] -= 1.0
        _accumulate(logits, grad * (g / batch))

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), backward)


cross_entropy = softmax_cross_entropy


def kl_divergence_with_temperature(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """Batch-mean KL(softmax(teacher/T) || softmax(student/T)), scaled by T**2.

    The teacher side is treated as a constant.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, DTYPE)
    if student_logits.shape != teacher.shape:
        raise DimensionError(f"student {student_logits.shape} and teacher {teacher.shape} shapes differ")
    if student_logits.ndim == 1:
        student_logits = student_logits.reshape(1, -1)
        teacher = teacher.reshape(1, -1)
    log_pt = _log_softmax(teacher / DTYPE(temperature), axis=-1)
    pt = np.exp(log_pt)
    log_ps = student_logits.scale(1.0 / temperature).log_softmax(-1)
    per_row = (Tensor(pt * log_pt) - log_ps * Tensor(pt)).sum(axis=-1)
    return per_row.mean().scale(temperature * temperature)


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """a.b / (|a||b| + eps) along the last axis, broadcasting leading axes.

    A zero-norm input yields 0 rather than an error.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine similarity: feature dims differ for {a.shape} and {b.shape}")
    if a.shape[-1] < 1:
        raise DimensionError("cosine similarity needs at least one feature")
    ad, bd = np.broadcast_arrays(a.data, b.data)
    dot = (ad * bd).sum(axis=-1)
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    denom = na * nb + DTYPE(eps)
    out = dot / denom

    def backward(g):
        g = g[..., None]
        d = denom[..., None]
        coef = (dot / (denom * denom))[..., None]
        if a.requires_grad:
            unit_a = np.divide(ad, na[..., None], out=np.zeros_like(ad), where=na[..., None] > 0)
            ga = g * (bd / d - coef * nb[..., None] * unit_a)
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            unit_b = np.divide(bd, nb[..., None], out=np.zeros_like(bd), where=nb[..., None] > 0)
            gb = g * (ad / d - coef * na[..., None] * unit_b)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out.astype(DTYPE), (a, b), backward)


def detach(x: Tensor) -> Tensor:
    return x.detach()


# -- optimizers ------------------------------------------------------------

class Optimizer:
    """Shared plumbing: holds the parameter list and a step counter."""

    def __init__(self, params: Iterable[Tensor], lr: float):
        if not lr >= 0:
            raise ParameterError(f"learning rate must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _active(self):
        for i, p in enumerate(self.params):
            if p.requires_grad and p.grad is not None:
                yield i, p

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self) -> None:
        self.step_count += 1
        lr = DTYPE(self.lr)
        for _, p in self._active():
            p.data -= lr * p.grad


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for i, p in self._active():
            g = p.grad
            if i not in self.m:
                self.m[i] = np.zeros_like(p.data)
                self.v[i] = np.zeros_like(p.data)
            m, v = self.m[i], self.v[i]
            m *= DTYPE(b1)
            m += DTYPE(1 - b1) * g
            v *= DTYPE(b2)
            v += DTYPE(1 - b2) * g * g
            update = (m / DTYPE(c1)) / (np.sqrt(v / DTYPE(c2)) + DTYPE(self.eps))
            p.data -= DTYPE(self.lr) * update


# -- gradient checking -----------------------------------------------------

def check_gradients(
    function: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-2,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-2,
) -> float:
    """Worst relative error between autodiff and central finite differences.

    ``function`` is a closure over ``inputs`` returning a scalar tensor.  The
    relative error of each element is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps near-zero gradients from amplifying float32 rounding.
    When ``n_samples`` is set, only that many randomly chosen elements
    (across all inputs) are probed.
    """
    inputs = list(inputs)
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        out = function()
        if out.size != 1:
            raise DimensionError(f"check_gradients needs a scalar function, got shape {out.shape}")
        analytic = []
        if out.requires_grad:
            out.backward()
        for t in inputs:
            analytic.append(np.zeros_like(t.data) if t.grad is None else t.grad.copy())

        probes = [(k, j) for k, t in enumerate(inputs) for j in range(t.size)]
        if n_samples is not None and n_samples < len(probes):
            rng = rng if rng is not None else np.random.default_rng(0)
            chosen = rng.choice(len(probes), size=n_samples, replace=False)
            probes = [probes[c] for c in sorted(chosen)]

        worst = 0.0
        with no_grad():
            for k, j in probes:
                flat = inputs[k].data.reshape(-1)
                original = flat[j]
                flat[j] = original + DTYPE(step)
                x_plus = float(flat[j])
                f_plus = float(function().data)
                flat[j] = original - DTYPE(step)
                x_minus = float(flat[j])
                f_minus = float(function().data)
                flat[j] = original
                numeric = (f_plus - f_minus) / (x_plus - x_minus)
                a = float(analytic[k].reshape(-1)[j])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag
            t.grad = None
