"""Minimal reverse-mode differentiation and first-order optimizers.

The tape works on whole ndarrays (one node per layer operation, not per
scalar), which is all the decoder/surrogate training needs.  Supported
primitives: affine maps (matmul, add, sub), elementwise multiply, sum/mean,
sin, cos, exp, log, square, leaky-ReLU, plus shape bookkeeping (reshape,
transpose).  Anything else raises :class:`UnsupportedPrimitiveError`.

Evaluation is single-threaded per call and touches no global state, so
distinct calls may run concurrently on shared (read-only) parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "ParamVector",
    "GradReport",
    "AdamState",
    "NonFiniteLossError",
    "UnsupportedPrimitiveError",
    "value_and_grad",
    "make_leaves",
    "harvest",
    "adam_step",
    "sgd_step",
    "constant",
    "matmul",
    "tsum",
    "tmean",
    "sin",
    "cos",
    "exp",
    "log",
    "square",
    "leaky_relu",
]


class NonFiniteLossError(RuntimeError):
    """Raised when a differentiated program produces NaN or Inf."""


class UnsupportedPrimitiveError(TypeError):
    """Raised for operations outside the supported primitive set."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node of the tape: an ndarray plus the vjp closures of its parents."""

    __slots__ = ("data", "parents", "track")

    # keep numpy from absorbing mixed expressions; ndarray <op> Tensor then
    # falls back to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, data, parents=(), track=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.track = track or any(p.track for p, _ in parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedPrimitiveError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise UnsupportedPrimitiveError(f"power {p!r} is not supported; use square()")

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def constant(x) -> Tensor:
    """Wrap an array as a non-tracked tensor (e.g. fixed basis evaluations)."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, *pairs) -> Tensor:
    parents = tuple((t, fn) for t, fn in pairs if t.track)
    return Tensor(data, parents)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(out,
                 (a, lambda g: _unbroadcast(g, a.data.shape)),
                 (b, lambda g: _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _make(out,
                 (a, lambda g: _unbroadcast(g, a.data.shape)),
                 (b, lambda g: _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _make(out,
                 (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                 (b, lambda g: _unbroadcast(g * a.data, b.data.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a_vec = a.data.ndim == 1
    b_vec = b.data.ndim == 1
    ad = a.data.reshape(1, -1) if a_vec else a.data
    bd = b.data.reshape(-1, 1) if b_vec else b.data
    full = ad @ bd
    out = full
    if b_vec:
        out = out.reshape(out.shape[:-1])
    if a_vec:
        out = out.reshape(out.shape[:-2] + out.shape[-1:])

    def _restore(g):
        # reinsert the axes squeezed away from the 1-d operands
        if a_vec and b_vec:
            return g.reshape(1, 1)
        if a_vec:
            return g.reshape(g.shape[:-1] + (1, g.shape[-1]))
        if b_vec:
            return g.reshape(g.shape + (1,))
        return g

    def da(g):
        grad = _restore(g) @ np.swapaxes(bd, -1, -2)
        if a_vec:
            grad = grad.reshape(grad.shape[:-2] + grad.shape[-1:])
        return _unbroadcast(grad, a.data.shape)

    def db(g):
        grad = np.swapaxes(ad, -1, -2) @ _restore(g)
        if b_vec:
            grad = grad.reshape(grad.shape[:-1])
        return _unbroadcast(grad, b.data.shape)

    return _make(out, (a, da), (b, db))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.data.shape).copy()

    return _make(out, (a, back))


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sin(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.sin(a.data), (a, lambda g: g * np.cos(a.data)))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.cos(a.data), (a, lambda g: -g * np.sin(a.data)))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a, lambda g: g * out))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a, lambda g: g / a.data))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a, lambda g: 2.0 * g * a.data))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    mask = a.data >= 0.0
    scale = np.where(mask, 1.0, slope)
    return _make(a.data * scale, (a, lambda g: g * scale))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2),
                 (a, lambda g: np.swapaxes(g, -1, -2)))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a, lambda g: g.reshape(old)))


def _backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate gradients of a scalar loss into every tracked node."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.track:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return grads


@dataclass(frozen=True)
class ParamVector:
    """A flat parameter vector with named, disjoint segments.

    ``layout`` maps a segment name to (offset, shape); the segments cover the
    vector exactly, so optimizer state and serialization stay trivially
    aligned with the parameters.
    """

    values: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        spans = sorted((off, off + int(np.prod(shape, dtype=int)))
                       for off, shape in self.layout.values())
        cursor = 0
        for lo, hi in spans:
            if lo != cursor:
                raise ValueError("segments must be disjoint and cover the vector")
            cursor = hi
        if cursor != values.size:
            raise ValueError("segments must cover the vector exactly")

    @classmethod
    def from_segments(cls, segments: dict[str, np.ndarray]) -> "ParamVector":
        layout, chunks, off = {}, [], 0
        for name, arr in segments.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout[name] = (off, arr.shape)
            chunks.append(arr.ravel())
            off += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    def segment(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.values[off:off + int(np.prod(shape, dtype=int))].reshape(shape)

    def names(self):
        return self.layout.keys()

    def with_values(self, values: np.ndarray) -> "ParamVector":
        if values.size != self.values.size:
            raise ValueError("replacement values have the wrong length")
        return ParamVector(values, self.layout)

    def zeros_like(self) -> "ParamVector":
        return self.with_values(np.zeros_like(self.values))

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class GradReport:
    """Loss value, layout-aligned gradient, and optional named scalars."""

    loss: float
    grad: ParamVector
    aux: dict[str, float] = field(default_factory=dict)


def make_leaves(params: ParamVector) -> dict[str, Tensor]:
    """Tracked leaf tensors, one per parameter segment."""
    return {name: Tensor(params.segment(name), track=True) for name in params.names()}


def harvest(loss_t: Tensor, leaves: dict[str, Tensor], params: ParamVector,
            aux: dict | None = None) -> GradReport:
    """Backprop a scalar tape node and assemble the layout-aligned gradient."""
    if loss_t.data.size != 1:
        raise ValueError("program must return a scalar loss")
    loss = float(loss_t.data)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"loss is non-finite ({loss})")
    grads = _backward(loss_t)
    flat = np.zeros_like(params.values)
    for name, leaf in leaves.items():
        g = grads.get(id(leaf))
        if g is not None:
            off, shape = params.layout[name]
            flat[off:off + g.size] = g.ravel()
    aux_out = {k: float(v.data) if isinstance(v, Tensor) else float(v)
               for k, v in (aux or {}).items()}
    return GradReport(loss=loss, grad=params.with_values(flat), aux=aux_out)


def value_and_grad(program, params: ParamVector, *inputs) -> GradReport:
    """Evaluate ``program`` and differentiate it with respect to *params*.

    ``program`` receives a dict of tracked Tensors, one per parameter segment
    (plus any extra positional inputs), and returns a scalar Tensor or a
    (scalar Tensor, aux dict) pair.  The returned gradient shares the
    parameter layout exactly.
    """
    leaves = make_leaves(params)
    result = program(leaves, *inputs)
    loss_t, aux = result if isinstance(result, tuple) else (result, {})
    return harvest(loss_t, leaves, params, aux)


@dataclass
class AdamState:
    """First/second moment estimates; create with :meth:`init`."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def init(cls, params: ParamVector) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values))


def adam_step(state: AdamState, params: ParamVector, grad: ParamVector,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update; returns (new params, new state).  Deterministic."""
    if grad.values.shape != params.values.shape or state.m.shape != params.values.shape:
        raise ValueError("parameter/gradient/state shape mismatch")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad.values
    v = b2 * state.v + (1.0 - b2) * grad.values * grad.values
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    new_values = params.values - lr * mhat / (np.sqrt(vhat) + eps)
    return params.with_values(new_values), AdamState(m, v, t)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """Plain gradient-descent update (the literal procedure-level optimizer)."""
    if grad.values.shape != params.values.shape:
        raise ValueError("parameter/gradient shape mismatch")
    return params.with_values(params.values - lr * grad.values)
