"""Small reverse-mode autodiff over float64 numpy arrays, plus Adam.

Tensors are immutable. Operations performed while a :class:`Tape` is active
and involving at least one tensor that requires a gradient are appended to
that tape; :func:`backward` replays the tape in reverse.

    >>> w = Tensor(3.0, requires_grad=True, name="w")
    >>> with Tape() as tape:
    ...     loss = w * w
    >>> backward(loss, tape)[w]
    array(6.)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, TrainingError

__all__ = [
    "Tensor", "ComplexTensor", "Tape", "backward",
    "add", "sub", "mul", "hadamard", "scale", "matmul", "transpose", "swapaxes",
    "reshape", "tsum", "mean", "relu", "square", "softmax_rows", "complex_abs",
    "stack", "take",
    "AdamState", "adam_step", "init_uniform",
]

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of the differentiable operations executed under it."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar constant is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __rmatmul__(self, other):
        return matmul(_as_tensor(other), self)

    def __getitem__(self, index):
        return take(self, index)


@dataclass(frozen=True)
class ComplexTensor:
    """Complex values carried as a pair of real tensors."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise DimensionError(f"real/imag shapes differ: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    def map_real(self, w: Tensor) -> "ComplexTensor":
        """Right-multiply by a real matrix, acting on both parts."""
        return ComplexTensor(matmul(self.re, w), matmul(self.im, w))

    def swapaxes(self, a: int, b: int) -> "ComplexTensor":
        return ComplexTensor(swapaxes(self.re, a, b), swapaxes(self.im, a, b))

    def __matmul__(self, other: "ComplexTensor") -> "ComplexTensor":
        re = sub(matmul(self.re, other.re), matmul(self.im, other.im))
        im = add(matmul(self.re, other.im), matmul(self.im, other.re))
        return ComplexTensor(re, im)

    def abs(self) -> Tensor:
        return complex_abs(self.re, self.im)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _ACTIVE_TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _ACTIVE_TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- primitives ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    _broadcast_check("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes differ: {a.shape} vs {b.shape}")
    return mul(a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions differ: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by max subtraction."""
    a = _as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError(f"softmax_rows: empty last dimension in shape {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (a,), bw)


def complex_abs(re: Tensor, im: Tensor) -> Tensor:
    """Modulus of re + i*im. The subgradient at 0 is taken as 0."""
    if re.shape != im.shape:
        raise DimensionError(f"complex_abs: shapes differ: {re.shape} vs {im.shape}")
    r = np.hypot(re.data, im.data)
    safe = np.where(r > 0, r, 1.0)

    def bw(g):
        k = np.where(r > 0, g / safe, 0.0)
        return k * re.data, k * im.data

    return _result(r, (re, im), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ: {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))

    return _result(out, tensors, bw)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back with ``np.add.at``."""
    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), bw)


# -- reverse pass ---------------------------------------------------------------

def backward(output: Tensor, tape: Tape, wrt: Sequence[Tensor] | None = None) -> dict:
    """Gradients of a scalar ``output`` with respect to every leaf on ``tape``.

    Returns a dict keyed by leaf tensor. Leaves listed in ``wrt`` but never
    reached get a zero gradient.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if output.requires_grad and output.parents:
        grads[id(output)] = np.ones_like(output.data)
    elif output.requires_grad:
        leaves[id(output)] = output
        grads[id(output)] = np.ones_like(output.data)

    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if not parent.parents:
                leaves[key] = parent
            grads[key] = grads[key] + pg if key in grads else np.asarray(pg, dtype=np.float64)

    result = {leaves[k]: grads[k] for k in leaves}
    for t in wrt or ():
        if t not in result:
            result[t] = np.zeros(t.shape)
    return result


# -- optimisation -------------------------------------------------------------

def init_uniform(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Parameters without a gradient are kept."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise DimensionError(
                f"gradient shape {np.shape(g)} does not match parameter {name!r} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    updated = dict(params)
    for name, g in grads.items():
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        updated[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return updated, state
