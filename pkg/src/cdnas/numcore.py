"""Batched tensors, a reverse-mode tape, and Adam with a nonnegativity projection.

Values are batched: a scalar-shaped value holds an array of shape ``(B,)`` and a
vector-shaped value holds ``(B, D)``.  Every operation is recorded on a
:class:`Tape`; :func:`backward` walks it in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .operators import OperatorKind

EPS = 1e-6
OVERFLOW_GUARD = 1e12


class InfeasibleShapeError(ValueError):
    """An operator received an input of the wrong shape."""


class NumericOverflowError(ArithmeticError):
    """A forward value left the finite range ``|v| <= 1e12``."""


class Value:
    """A node on the tape; ``data`` is ``(B,)`` for scalars, ``(B, D)`` for vectors."""

    __slots__ = ("data", "index", "tape")

    def __init__(self, data: np.ndarray, index: int, tape: "Tape"):
        self.data = data
        self.index = index
        self.tape = tape

    @property
    def is_vector(self) -> bool:
        return self.data.ndim == 2

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        kind = f"Vector({self.data.shape[1]})" if self.is_vector else "Scalar"
        return f"Value({kind}, batch={self.data.shape[0]})"


@dataclass
class _Entry:
    value: Value
    inputs: tuple
    vjp: object  # callable(grad) -> tuple of input grads, or None for leaves
    param: str | None = None


class Tape:
    """Ordered record of primitive operations; inputs always precede outputs."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __len__(self):
        return len(self.entries)

    def _push(self, data, inputs=(), vjp=None, param=None) -> Value:
        value = Value(data, len(self.entries), self)
        self.entries.append(_Entry(value, tuple(inputs), vjp, param))
        return value

    def input(self, data) -> Value:
        """Record a constant or differentiable input (no parameter binding)."""
        return self._push(np.asarray(data, dtype=np.float64))

    def param(self, store: "ParamStore", name: str) -> Value:
        """Record the full parameter tensor ``name`` as a leaf."""
        return self._push(store[name], param=name)

    def record(self, data: np.ndarray, inputs, vjp) -> Value:
        if not np.all(np.isfinite(data)) or (data.size and np.max(np.abs(data)) > OVERFLOW_GUARD):
            raise NumericOverflowError("forward value exceeded the overflow guard")
        return self._push(data, inputs, vjp)


def backward(tape: Tape, output: Value, seed=None) -> dict:
    """Reverse pass from ``output``.

    Returns a dict keyed by every leaf :class:`Value` (inputs and parameters)
    that received a gradient.  ``seed`` defaults to ones.
    """
    grads: dict[int, np.ndarray] = {}
    grads[output.index] = np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=np.float64)
    if grads[output.index].shape != output.data.shape:
        raise ValueError("seed shape does not match output")
    result = {}
    for entry in reversed(tape.entries[: output.index + 1]):
        g = grads.pop(entry.value.index, None)
        if g is None:
            continue
        if entry.vjp is None:
            result[entry.value] = g
            continue
        for inp, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None:
                continue
            prev = grads.get(inp.index)
            grads[inp.index] = gi if prev is None else prev + gi
    return result


def param_grads(tape: Tape, grads: dict) -> dict[str, np.ndarray]:
    """Collapse a :func:`backward` result to ``{param name: gradient}``."""
    out: dict[str, np.ndarray] = {}
    for value, g in grads.items():
        name = tape.entries[value.index].param
        if name is not None:
            out[name] = out[name] + g if name in out else g
    return out


# --- primitives ---------------------------------------------------------------


def _unbroadcast(g: np.ndarray, like: Value) -> np.ndarray:
    if like.is_vector or g.ndim == 1:
        return g
    return g.sum(axis=1)


def _lift(a: Value, b: Value):
    x, y = a.data, b.data
    if a.is_vector and not b.is_vector:
        y = y[:, None]
    elif b.is_vector and not a.is_vector:
        x = x[:, None]
    return x, y


def _require_vector(kind: OperatorKind, *values: Value):
    for v in values:
        if not v.is_vector:
            raise InfeasibleShapeError(f"{kind.label} needs a vector input, got a scalar")


def apply_primitive(kind: OperatorKind, inputs, params=None, tape: Tape | None = None) -> Value:
    """Apply one search-space operator to tape values.

    ``params`` maps ``"W"`` to a parameter :class:`Value` for FFN, FFN_D and
    Concat; other operators take none.
    """
    if len(inputs) != kind.arity:
        raise ValueError(f"{kind.label} takes {kind.arity} input(s), got {len(inputs)}")
    # non-finite results are reported by the overflow guard, not as warnings
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        return _apply(kind, inputs, params, tape or inputs[0].tape)


def _apply(kind: OperatorKind, inputs, params, tape: Tape) -> Value:
    K = OperatorKind

    if kind.arity == 1:
        (a,) = inputs
        x = a.data
        if kind is K.NEG:
            return tape.record(-x, (a,), lambda g: (-g,))
        if kind is K.ABS:
            return tape.record(np.abs(x), (a,), lambda g: (g * np.sign(x),))
        if kind is K.INV:
            d = x + EPS
            return tape.record(1.0 / d, (a,), lambda g: (-g / (d * d),))
        if kind is K.SQUARE:
            return tape.record(x * x, (a,), lambda g: (2.0 * x * g,))
        if kind is K.SQRT:
            s = np.sign(x)
            r = np.sqrt(np.abs(x) + EPS)
            # sign held constant; d|x|/dx = sign(x), so the slope is sign^2 / (2r)
            return tape.record(s * r, (a,), lambda g: (g * s * s / (2.0 * r),))
        if kind is K.TANH:
            t = np.tanh(x)
            return tape.record(t, (a,), lambda g: (g * (1.0 - t * t),))
        if kind is K.SIGMOID:
            return sigmoid(a)
        if kind is K.SOFTPLUS:
            return tape.record(np.logaddexp(0.0, x), (a,), lambda g: (g * expit(x),))

        _require_vector(kind, a)
        if kind is K.SUM:
            return tape.record(x.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], x.shape[1], axis=1),))
        if kind is K.MEAN:
            D = x.shape[1]
            return tape.record(x.mean(axis=1), (a,), lambda g: (np.repeat(g[:, None] / D, D, axis=1),))
        W = params["W"]
        if kind is K.FFN:
            return tape.record(
                x @ W.data[:, 0], (a, W), lambda g: (np.outer(g, W.data[:, 0]), (x.T @ g)[:, None])
            )
        if kind is K.FFN_D:
            return matmul(a, W)
        raise AssertionError(kind)

    a, b = inputs
    if kind is K.ADD:
        x, y = _lift(a, b)
        return tape.record(x + y, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))
    if kind is K.MUL:
        x, y = _lift(a, b)
        return tape.record(
            x * y, (a, b), lambda g: (_unbroadcast(g * y, a), _unbroadcast(g * x, b))
        )
    if kind is K.CONCAT:
        _require_vector(kind, a, b)
        W = params["W"]
        D = a.data.shape[1]
        xy = np.concatenate([a.data, b.data], axis=1)

        def vjp(g):
            gxy = g @ W.data.T
            return gxy[:, :D], gxy[:, D:], xy.T @ g

        return tape.record(xy @ W.data, (a, b, W), vjp)
    raise AssertionError(kind)


def sigmoid(a: Value) -> Value:
    s = expit(a.data)
    return a.tape.record(s, (a,), lambda g: (g * s * (1.0 - s),))


def matmul(a: Value, W: Value) -> Value:
    """``(B, n) @ (n, m)``."""
    x = a.data
    return a.tape.record(x @ W.data, (a, W), lambda g: (g @ W.data.T, x.T @ g))


def linear(a: Value, W: Value, b: Value) -> Value:
    """Affine layer ``x @ W + b``; ``b`` has shape ``(m,)``."""
    x = a.data
    return a.tape.record(
        x @ W.data + b.data, (a, W, b), lambda g: (g @ W.data.T, x.T @ g, g.sum(axis=0))
    )


def squeeze_last(a: Value) -> Value:
    """``(B, 1) -> (B,)``."""
    return a.tape.record(a.data[:, 0], (a,), lambda g: (g[:, None],))


def gather(table: Value, idx: np.ndarray) -> Value:
    """Row lookup ``table[idx]``; gradients scatter-add back into the table."""
    idx = np.asarray(idx)
    n_rows = table.data.shape[0]

    def vjp(g):
        out = np.zeros((n_rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return table.tape.record(table.data[idx], (table,), vjp)


def bce_with_logits(z: Value, y: np.ndarray) -> Value:
    """Mean binary cross-entropy of ``sigmoid(z)`` against labels ``y``."""
    x = z.data
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    loss = np.mean(np.logaddexp(0.0, x) - y * x)
    return z.tape.record(np.array(loss), (z,), lambda g: (g * (expit(x) - y) / n,))


# --- parameters and optimizer --------------------------------------------------


@dataclass
class Param:
    data: np.ndarray
    monotonic: bool = False
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)


class ParamStore:
    """Named parameters with Adam moment buffers and a shared step counter."""

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.step = 0

    def add(self, name: str, data, monotonic: bool = False) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Param(data, monotonic)
        if monotonic:
            np.maximum(p.data, 0.0, out=p.data)
        self.params[name] = p

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].data

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.params[k].data[...] = arr


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, then project monotonic parameters onto ``>= 0``."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = store.params[name]
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        p.data -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        if p.monotonic:
            np.maximum(p.data, 0.0, out=p.data)
