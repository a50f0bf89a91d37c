"""Reverse-mode differentiable computation over numpy float64 arrays.

A `Tape` records every primitive applied to tensors that require gradients;
`Tape.backward(loss)` walks the record once in reverse and accumulates
gradients into the participating leaf tensors' `.grad`.

Recording is scoped with a context manager:

    with Tape() as tape:
        y = pointwise_linear(x, w, b)
        loss = mean_reduce(mul(y, y))
    tape.backward(loss)
    w.grad  # dLoss/dw

Outside any active tape the same functions run forward-only, which is the
fast path for inference. Values are float64 end to end so finite-difference
gradient checks are meaningful.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "scale_add",
    "affine",
    "matmul",
    "pointwise_linear",
    "relu",
    "sigmoid",
    "sqrt",
    "absolute",
    "max_reduce",
    "sum_reduce",
    "mean_reduce",
    "concat",
    "gather_rows",
    "reshape",
    "transpose",
]


class Tensor:
    """Dense value with optional gradient tracking."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "vjps")

    def __init__(self, out, inputs, vjps):
        self.out = out
        self.inputs = inputs
        self.vjps = vjps


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations, replayed once in reverse."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.visited = 0  # nodes touched by the last backward pass

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        assert _ACTIVE_TAPES and _ACTIVE_TAPES[-1] is self
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into each requires_grad leaf's .grad."""
        if loss.values.ndim != 0:
            raise ValueError(f"loss must be scalar, got shape {loss.values.shape}")
        produced = {id(node.out) for node in self._nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        self.visited = 0
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            self.visited += 1
            for inp, vjp in zip(node.inputs, node.vjps):
                if vjp is None or not inp.requires_grad:
                    continue
                gi = vjp(g)
                if id(inp) in produced:
                    acc = grads.get(id(inp))
                    grads[id(inp)] = gi if acc is None else acc + gi
                else:
                    inp.grad = gi if inp.grad is None else inp.grad + gi


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjps: tuple) -> Tensor:
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1]._nodes.append(_Node(out, inputs, vjps))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.values + b.values)
    return _record(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.values.shape), lambda g: _unbroadcast(g, b.values.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.values - b.values)
    return _record(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.values.shape), lambda g: _unbroadcast(-g, b.values.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.values * b.values)
    return _record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.values, a.values.shape),
            lambda g: _unbroadcast(g * a.values, b.values.shape),
        ),
    )


def scale_add(a, b, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    """alpha * a + beta * b with constant scalars alpha, beta."""
    a, b = _lift(a), _lift(b)
    out = Tensor(alpha * a.values + beta * b.values)
    return _record(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(alpha * g, a.values.shape),
            lambda g: _unbroadcast(beta * g, b.values.shape),
        ),
    )


def affine(a, scale: float, shift: float = 0.0) -> Tensor:
    """scale * a + shift elementwise with constant scalars."""
    a = _lift(a)
    out = Tensor(scale * a.values + shift)
    return _record(out, (a,), (lambda g: scale * g,))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires 2-D+ operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values)

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.values.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.values.shape)

    return _record(out, (a, b), (vjp_a, vjp_b))


def pointwise_linear(x, w, b) -> Tensor:
    """Shared affine map over the last axis: x @ w + b.

    The same weights apply to every point (leading axes), which is the
    "1x1 convolution" used throughout point-set networks.
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    if w.ndim != 2 or b.ndim != 1 or x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(
            f"pointwise_linear shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    out = Tensor(x.values @ w.values + b.values)

    def vjp_x(g):
        return g @ w.values.T

    def vjp_w(g):
        return x.values.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])

    def vjp_b(g):
        return g.reshape(-1, b.shape[0]).sum(axis=0)

    return _record(out, (x, w, b), (vjp_x, vjp_w, vjp_b))


def relu(x) -> Tensor:
    x = _lift(x)
    out = Tensor(np.maximum(x.values, 0.0))
    mask = x.values > 0.0  # subgradient 0 at exactly 0
    return _record(out, (x,), (lambda g: g * mask,))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    v = x.values
    s = np.where(v >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = Tensor(s)
    return _record(out, (x,), (lambda g: g * s * (1.0 - s),))


def sqrt(x) -> Tensor:
    """Elementwise square root; not differentiable at 0 (callers keep inputs positive)."""
    x = _lift(x)
    s = np.sqrt(x.values)
    out = Tensor(s)
    return _record(out, (x,), (lambda g: g * (0.5 / s),))


def absolute(x) -> Tensor:
    x = _lift(x)
    out = Tensor(np.abs(x.values))
    sign = np.sign(x.values)  # subgradient 0 at exactly 0
    return _record(out, (x,), (lambda g: g * sign,))


def max_reduce(x, axis: int) -> Tensor:
    """Max over one axis. The backward pass routes the full gradient to the
    first maximal element along the axis (numpy argmax tie-break)."""
    x = _lift(x)
    idx = np.argmax(x.values, axis=axis)
    out = Tensor(np.take_along_axis(x.values, np.expand_dims(idx, axis), axis).squeeze(axis))

    def vjp(g):
        z = np.zeros_like(x.values)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return z

    return _record(out, (x,), (vjp,))


def sum_reduce(x, axis: int | None = None) -> Tensor:
    x = _lift(x)
    out = Tensor(x.values.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, x.values.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), x.values.shape).copy()

    return _record(out, (x,), (vjp,))


def mean_reduce(x, axis: int | None = None) -> Tensor:
    x = _lift(x)
    out = Tensor(x.values.mean(axis=axis))
    count = x.values.size if axis is None else x.values.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, x.values.shape).copy()
        return np.broadcast_to(np.expand_dims(g / count, axis), x.values.shape).copy()

    return _record(out, (x,), (vjp,))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.values for t in ts], axis=axis))
    sizes = [t.values.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        lo, hi = offsets[k], offsets[k + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _record(out, tuple(ts), tuple(make_vjp(k) for k in range(len(ts))))


def gather_rows(x, idx) -> Tensor:
    """Select rows x[idx]; idx is any integer array. Gradients accumulate back
    into the selected rows (duplicate indices sum)."""
    x = _lift(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.values[idx])

    def vjp(g):
        z = np.zeros_like(x.values)
        np.add.at(z, idx, g)
        return z

    return _record(out, (x,), (vjp,))


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    out = Tensor(x.values.reshape(shape))
    return _record(out, (x,), (lambda g: g.reshape(x.values.shape),))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _lift(x)
    if x.ndim < 2:
        raise ValueError(f"transpose requires a 2-D+ tensor, got shape {x.shape}")
    out = Tensor(np.swapaxes(x.values, -1, -2))
    return _record(out, (x,), (lambda g: np.swapaxes(g, -1, -2),))
