"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every value on a :class:`Tape` is a 2-D ``float64`` numpy array. Operations
are evaluated eagerly when recorded, and :meth:`Tape.backward` walks the
recorded nodes in reverse to accumulate adjoints. The tape is first-order
only: second-order quantities (hypergradients through training) are obtained
by recording hand-derived inner gradients as ordinary primitives.

Subgradient conventions at kinks: relu, abs and clamp_min pass zero gradient
at the kink, and sqrt passes zero gradient where its output is exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class ContractError(ValueError):
    """Raised when a documented precondition is violated."""


def as_tensor(x) -> np.ndarray:
    """Coerce scalars, vectors and matrices to a 2-D float64 array.

    1-D input becomes a column.
    """
    arr = np.array(x, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    name: str
    arity: int
    forward: Callable
    backward: Callable  # (g, out, inputs, needs, attrs) -> tuple of grads
    check: Callable | None = None


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, arity, check=None):
    def deco(pair):
        fwd, bwd = pair
        PRIMITIVES[name] = Primitive(name, arity, fwd, bwd, check)
        return pair

    return deco


def _same_shape(name):
    def check(a, b, **_):
        if a.shape != b.shape:
            raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")

    return check


def _check_matmul(a, b, **_):
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")


def _check_add_row(a, row, **_):
    if row.shape != (1, a.shape[1]):
        raise DimensionError(f"add_row: row shape {row.shape} does not broadcast over {a.shape}")


def _check_scale_rows(v, a, **_):
    if v.shape != (a.shape[0], 1):
        raise DimensionError(f"scale_rows: column shape {v.shape} does not match {a.shape}")


def _check_masked_fill(a, mask, value=0.0):
    if np.shape(mask) != a.shape:
        raise DimensionError(f"masked_fill: mask shape {np.shape(mask)} differs from {a.shape}")


def _check_row_select(a, rows):
    rows = np.asarray(rows)
    if rows.ndim != 1 or (rows.size and (rows.min() < 0 or rows.max() >= a.shape[0])):
        raise DimensionError(f"row_select: row indices out of range for {a.shape}")


def _check_scatter(w, rows, cols, n):
    if w.shape != (len(rows), 1) or len(rows) != len(cols):
        raise DimensionError(f"scatter_sym: weights {w.shape} do not match {len(rows)} pairs")


def _check_log(a, **_):
    if np.any(a <= 0):
        raise ContractError("log: input must be strictly positive")


def _check_sqrt(a, **_):
    if np.any(a < 0):
        raise ContractError("sqrt: input must be nonnegative")


def _check_divide(a, b, **_):
    _same_shape("divide")(a, b)
    if np.any(b == 0):
        raise ContractError("divide: zero denominator")


def _reduce_check(a, axis=None):
    if axis not in (None, 0, 1):
        raise DimensionError(f"reduce: axis must be None, 0 or 1, got {axis}")


_register("matmul", 2, _check_matmul)((
    lambda a, b: a @ b,
    lambda g, out, x, needs: (g @ x[1].T if needs[0] else None,
                              x[0].T @ g if needs[1] else None),
))
_register("add", 2, _same_shape("add"))((
    lambda a, b: a + b,
    lambda g, out, x, needs: (g, g),
))
_register("subtract", 2, _same_shape("subtract"))((
    lambda a, b: a - b,
    lambda g, out, x, needs: (g, -g),
))
_register("hadamard", 2, _same_shape("hadamard"))((
    lambda a, b: a * b,
    lambda g, out, x, needs: (g * x[1] if needs[0] else None,
                              g * x[0] if needs[1] else None),
))
_register("divide", 2, _check_divide)((
    lambda a, b: a / b,
    lambda g, out, x, needs: (g / x[1] if needs[0] else None,
                              -g * out / x[1] if needs[1] else None),
))
_register("scale", 1)((
    lambda a, factor: a * factor,
    lambda g, out, x, needs, factor: (g * factor,),
))
_register("add_row", 2, _check_add_row)((
    lambda a, row: a + row,
    lambda g, out, x, needs: (g, g.sum(axis=0, keepdims=True) if needs[1] else None),
))
_register("scale_rows", 2, _check_scale_rows)((
    lambda v, a: v * a,
    lambda g, out, x, needs: ((g * x[1]).sum(axis=1, keepdims=True) if needs[0] else None,
                              g * x[0] if needs[1] else None),
))
_register("relu", 1)((
    lambda a: np.maximum(a, 0.0),
    lambda g, out, x, needs: (g * (x[0] > 0),),
))
_register("clamp_min", 1)((
    lambda a, lo: np.maximum(a, lo),
    lambda g, out, x, needs, lo: (g * (x[0] > lo),),
))
_register("abs", 1)((
    np.abs,
    lambda g, out, x, needs: (g * np.sign(x[0]),),
))
_register("square", 1)((
    np.square,
    lambda g, out, x, needs: (2.0 * g * x[0],),
))
_register("sqrt", 1, _check_sqrt)((
    np.sqrt,
    lambda g, out, x, needs: (np.divide(g, 2.0 * out, out=np.zeros_like(out), where=out > 0),),
))
_register("exp", 1)((
    np.exp,
    lambda g, out, x, needs: (g * out,),
))
_register("log", 1, _check_log)((
    np.log,
    lambda g, out, x, needs: (g / x[0],),
))


def _softmax(a):
    z = np.exp(a - a.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _log_softmax(a):
    shifted = a - a.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


_register("softmax_rows", 1)((
    _softmax,
    lambda g, out, x, needs: (out * (g - (g * out).sum(axis=1, keepdims=True)),),
))
_register("log_softmax_rows", 1)((
    _log_softmax,
    lambda g, out, x, needs: (g - np.exp(out) * g.sum(axis=1, keepdims=True),),
))
_register("transpose", 1)((
    lambda a: a.T.copy(),
    lambda g, out, x, needs: (g.T,),
))


def _row_select_bwd(g, out, x, needs, rows):
    grad = np.zeros_like(x[0])
    np.add.at(grad, np.asarray(rows), g)
    return (grad,)


_register("row_select", 1, _check_row_select)((
    lambda a, rows: a[np.asarray(rows)],
    _row_select_bwd,
))


def _reduce_sum(a, axis=None):
    if axis is None:
        return np.array([[a.sum()]])
    return a.sum(axis=axis, keepdims=True)


def _reduce_count(shape, axis):
    return shape[0] * shape[1] if axis is None else shape[axis]


_register("reduce_sum", 1, _reduce_check)((
    _reduce_sum,
    lambda g, out, x, needs, axis=None: (np.broadcast_to(g, x[0].shape).copy(),),
))
_register("reduce_mean", 1, _reduce_check)((
    lambda a, axis=None: _reduce_sum(a, axis) / _reduce_count(a.shape, axis),
    lambda g, out, x, needs, axis=None: (
        np.broadcast_to(g, x[0].shape) / _reduce_count(x[0].shape, axis),),
))
_register("masked_fill", 1, _check_masked_fill)((
    lambda a, mask, value=0.0: np.where(mask, value, a),
    lambda g, out, x, needs, mask, value=0.0: (np.where(mask, 0.0, g),),
))


def _scatter_fwd(w, rows, cols, n):
    out = np.zeros((n, n))
    out[rows, cols] = w[:, 0]
    out[cols, rows] = w[:, 0]
    return out


_register("scatter_sym", 1, _check_scatter)((
    _scatter_fwd,
    lambda g, out, x, needs, rows, cols, n: ((g[rows, cols] + g[cols, rows])[:, None],),
))


# --------------------------------------------------------------------------
# tape and variables


@dataclass(frozen=True)
class Var:
    """Handle to one value recorded on a tape."""

    tape: "Tape"
    index: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def T(self) -> "Var":
        return self.tape.transpose(self)

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.constant(np.broadcast_to(np.float64(other), self.shape))

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    def __radd__(self, other):
        return self.tape.add(self._lift(other), self)

    def __sub__(self, other):
        return self.tape.subtract(self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.subtract(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.hadamard(self, other)
        return self.tape.scale(self, factor=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self.tape.divide(self, other)
        return self.tape.scale(self, factor=1.0 / float(other))

    def __neg__(self):
        return self.tape.scale(self, factor=-1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


class Tape:
    """Ordered record of eagerly evaluated operations.

    Node ``k`` only refers to parents with index ``< k``, so the node list is
    always topologically ordered.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.nodes: list[tuple[str | None, tuple[int, ...], dict]] = []
        self.requires_grad: list[bool] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        arr = as_tensor(value)
        arr.setflags(write=False)
        self.values.append(arr)
        self.nodes.append((None, (), {}))
        self.requires_grad.append(requires_grad)
        return Var(self, len(self.values) - 1)

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def record(self, op: str, *inputs: Var, **attrs) -> Var:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise ContractError(f"unknown primitive {op!r}")
        if len(inputs) != prim.arity:
            raise ContractError(f"{op}: expected {prim.arity} inputs, got {len(inputs)}")
        for v in inputs:
            if not isinstance(v, Var) or v.tape is not self:
                raise ContractError(f"{op}: input is not a variable of this tape")
        args = [self.values[v.index] for v in inputs]
        if prim.check is not None:
            prim.check(*args, **attrs)
        out = np.asarray(prim.forward(*args, **attrs), dtype=np.float64)
        out.setflags(write=False)
        self.values.append(out)
        self.nodes.append((op, tuple(v.index for v in inputs), attrs))
        self.requires_grad.append(any(self.requires_grad[v.index] for v in inputs))
        return Var(self, len(self.values) - 1)

    def backward(self, root: Var, wrt: Iterable[Var] | None = None) -> dict[Var, np.ndarray]:
        """Gradients of the scalar ``root`` with respect to ``wrt``.

        ``wrt`` defaults to every leaf marked as requiring gradient and may
        also name intermediate variables. Unreached variables get zeros.
        The tape is left unchanged.
        """
        if root.tape is not self:
            raise ContractError("backward: root belongs to another tape")
        if root.shape != (1, 1):
            raise ContractError(f"backward: root must be 1x1, got {root.shape}")
        if wrt is None:
            wrt = [Var(self, k) for k, (op, _, _) in enumerate(self.nodes)
                   if op is None and self.requires_grad[k]]
        wrt = list(wrt)
        keep = {v.index for v in wrt}
        kept: dict[int, np.ndarray] = {}
        adj: dict[int, np.ndarray] = {root.index: np.ones((1, 1))}
        for k in range(root.index, -1, -1):
            g = adj.pop(k, None)
            if g is None:
                continue
            if k in keep:
                kept[k] = g
            op, parents, attrs = self.nodes[k]
            if op is None:
                continue
            needs = tuple(self.requires_grad[p] for p in parents)
            inputs = [self.values[p] for p in parents]
            grads = PRIMITIVES[op].backward(g, self.values[k], inputs, needs, **attrs)
            for p, need, gp in zip(parents, needs, grads):
                if not need or gp is None:
                    continue
                if p in adj:
                    adj[p] = adj[p] + gp
                else:
                    adj[p] = gp
        return {v: kept.get(v.index, np.zeros(v.shape)) for v in wrt}

    def __getattr__(self, name):
        # tape.matmul(a, b), tape.relu(a, ...) etc.
        if name in PRIMITIVES:
            return lambda *inputs, **attrs: self.record(name, *inputs, **attrs)
        raise AttributeError(name)


def record(tape: Tape, op: str, inputs: Sequence[Var], **attrs) -> Var:
    return tape.record(op, *inputs, **attrs)


def backward(tape: Tape, root: Var, wrt: Iterable[Var] | None = None) -> dict[Var, np.ndarray]:
    return tape.backward(root, wrt)


# --------------------------------------------------------------------------
# finite-difference checking


def default_step(x: np.ndarray) -> float:
    return 1e-6 * max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)


def grad_check(f: Callable[..., Var], point: Sequence, h: float | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(tape, *vars)`` must build a 1x1 root from one leaf per entry of
    ``point``. The error per coordinate is ``|ad - fd| / max(1, |fd|)``.
    ``h=None`` picks ``1e-6 * max(1, max|x|)`` per input.
    """
    if h is not None and not 0 < h <= 1e-3:
        raise ContractError(f"grad_check: step {h} outside (0, 1e-3]")
    point = [as_tensor(p) for p in point]

    def evaluate(arrays):
        tape = Tape()
        leaves = [tape.leaf(a) for a in arrays]
        return tape, leaves, f(tape, *leaves)

    tape, leaves, root = evaluate(point)
    grads = tape.backward(root, leaves)
    worst = 0.0
    for k, x in enumerate(point):
        step = default_step(x) if h is None else h
        ad = grads[leaves[k]]
        for idx in np.ndindex(x.shape):
            plus = [p.copy() for p in point]
            minus = [p.copy() for p in point]
            plus[k][idx] += step
            minus[k][idx] -= step
            fp = evaluate(plus)[2].value[0, 0]
            fm = evaluate(minus)[2].value[0, 0]
            fd = (fp - fm) / (2.0 * step)
            worst = max(worst, abs(ad[idx] - fd) / max(1.0, abs(fd)))
    return worst
