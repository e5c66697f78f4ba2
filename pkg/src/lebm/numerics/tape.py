"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every primitive as a node holding its forward value,
its parent node indices and a vector-Jacobian product closure. Node indices
are assigned in creation order, so parents always precede children and the
backward sweep is a single reverse pass over the list.

Nodes that do not depend on any ``requires_grad`` leaf carry no closure and
are skipped on the way back; this keeps Langevin score evaluations from
paying for parameter gradients nobody asked for.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def ensure_finite(value: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values in {what}")
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index", "value", "requires_grad")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise TapeError("cannot combine variables from different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Var) or np.ndim(other) > 0:
            return mul(self, self._lift(other))
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self, axis=None):
        return vmean(self, axis)

    def __repr__(self) -> str:
        return f"Var(index={self.index}, shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._parents)

    def _push(self, value, parents: tuple[Var, ...], vjp, requires_grad: bool) -> Var:
        if self._consumed:
            raise TapeError("tape already swept backward; call reset() before reuse")
        value = np.asarray(value, dtype=np.float64)
        index = len(self._parents)
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp if requires_grad else None)
        self._shapes.append(value.shape)
        return Var(self, index, value, requires_grad)

    def var(self, value, requires_grad: bool = True) -> Var:
        return self._push(value, (), None, requires_grad)

    def const(self, value) -> Var:
        return self._push(value, (), None, False)

    def record(self, value, parents: Sequence[Var], vjp: Callable) -> Var:
        """Add a node; ``vjp(g, needs)`` returns one gradient (or None) per parent."""
        needs = tuple(p.requires_grad for p in parents)
        return self._push(value, tuple(parents), (vjp, needs), any(needs))

    def backward(self, root: Var, leaves: Iterable[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``root`` with respect to each leaf, in order."""
        if root.tape is not self:
            raise TapeError("root belongs to a different tape")
        if self._consumed:
            raise TapeError("tape already swept backward; call reset() before reuse")
        if root.value.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.value.shape}")
        leaves = list(leaves)
        self._consumed = True
        grads: list[np.ndarray | None] = [None] * (root.index + 1)
        grads[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = grads[i]
            entry = self._vjps[i]
            if g is None or entry is None:
                continue
            fn, needs = entry
            for p, gp in zip(self._parents[i], fn(g, needs)):
                if gp is None:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
        out = []
        for leaf in leaves:
            g = grads[leaf.index] if leaf.index < len(grads) else None
            out.append(np.zeros(self._shapes[leaf.index]) if g is None else np.array(g))
        return out


def backward_gradients(tape: Tape, root: Var, leaves: Iterable[Var]) -> list[np.ndarray]:
    return tape.backward(root, leaves)


# --- primitives -----------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None,
        )

    return a.tape.record(a.value + b.value, (a, b), vjp)


def sub(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(-g, sb) if needs[1] else None,
        )

    return a.tape.record(a.value - b.value, (a, b), vjp)


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (
            _unbroadcast(g * bv, av.shape) if needs[0] else None,
            _unbroadcast(g * av, bv.shape) if needs[1] else None,
        )

    return a.tape.record(av * bv, (a, b), vjp)


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g, needs: (g * c,))


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value

    def vjp(g, needs):
        return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

    return a.tape.record(av @ bv, (a, b), vjp)


def linear(x: Var, w, b) -> Var:
    """Fused ``x @ w + b`` for a row batch ``x``.

    ``w`` and ``b`` may be Vars or plain arrays (treated as constants).
    """
    xv = x.value
    wv = w.value if isinstance(w, Var) else w
    bv = b.value if isinstance(b, Var) else b
    if not isinstance(w, Var):

        def vjp_const(g, needs):
            return (g @ wv.T,)

        return x.tape.record(xv @ wv + bv, (x,), vjp_const)

    def vjp(g, needs):
        return (
            g @ wv.T if needs[0] else None,
            xv.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    return x.tape.record(xv @ wv + bv, (x, w, b), vjp)


def leaky_relu(x: Var, slope: float) -> Var:
    xv = x.value
    y = xv * slope
    np.maximum(xv, y, out=y)

    def vjp(g, needs):
        return (np.where(xv > 0, g, g * slope),)

    return x.tape.record(y, (x,), vjp)


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return x.tape.record(y, (x,), lambda g, needs: (g * (1.0 - y * y),))


def square(x: Var) -> Var:
    xv = x.value
    return x.tape.record(xv * xv, (x,), lambda g, needs: (2.0 * g * xv,))


def vsum(x: Var, axis=None) -> Var:
    shape = x.shape
    out = x.value.sum(axis=axis)
    kept = None
    if axis is not None:
        ax = axis % len(shape)
        kept = tuple(1 if i == ax else n for i, n in enumerate(shape))

    def vjp(g, needs):
        if kept is not None:
            g = g.reshape(kept)
        return (np.broadcast_to(g, shape),)

    return x.tape.record(out, (x,), vjp)


def vmean(x: Var, axis=None) -> Var:
    count = x.value.size if axis is None else x.shape[axis]
    return scale(vsum(x, axis), 1.0 / count)
