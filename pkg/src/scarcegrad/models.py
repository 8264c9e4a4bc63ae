"""Inner learners: a sum-aggregation message-passing GCN and Laplacian label propagation.

Both expose hand-written gradients of their training objective built from
first-order tape primitives, so that unrolled training can be differentiated
with a single reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import ContractError, DimensionError, Tape, Var

LOSSES = ("mse", "cce")


@dataclass(frozen=True)
class LabeledTargets:
    """Observed labels; rows outside ``mask`` are zero-filled and never read by a loss."""

    Y: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        Y = np.array(self.Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if len(mask) != len(Y):
            raise DimensionError(f"mask of length {len(mask)} for {len(Y)} label rows")
        Y[~mask] = 0.0
        if not np.all(np.isfinite(Y)):
            raise ContractError("labelled targets must be finite")
        Y.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "mask", mask)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def c(self) -> int:
        return self.Y.shape[1]

    def row_mask(self, nodes) -> np.ndarray:
        """``n x c`` matrix of ones on the rows of ``nodes``."""
        M = np.zeros_like(self.Y)
        M[np.asarray(nodes, dtype=np.int64)] = 1.0
        return M


@dataclass
class GcnParams:
    """Per-layer ``(W1, W2, b)`` with ``b`` stored as a ``1 x d`` row."""

    layers: list[tuple[np.ndarray, np.ndarray, np.ndarray]]

    @classmethod
    def xavier(cls, dims: Sequence[int], rng: np.random.Generator) -> "GcnParams":
        layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (d_in + d_out))
            W1 = rng.uniform(-bound, bound, size=(d_in, d_out))
            W2 = rng.uniform(-bound, bound, size=(d_in, d_out))
            layers.append((W1, W2, np.zeros((1, d_out))))
        return cls(layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "GcnParams":
        it = iter(arrays)
        return cls([(np.asarray(a), np.asarray(b), np.asarray(c)) for a, b, c in zip(it, it, it)])

    def on(self, tape: Tape, requires_grad: bool = False) -> list[Var]:
        return [tape.leaf(a, requires_grad) for a in self.arrays()]


def _group(flat: Sequence[Var]) -> list[tuple[Var, Var, Var]]:
    if len(flat) % 3:
        raise DimensionError("GCN parameters come in (W1, W2, b) triples")
    it = iter(flat)
    return list(zip(it, it, it))


class GcnTrace(NamedTuple):
    output: Var
    inputs: list[Var]      # X^[l-1] per layer
    propagated: list[Var]  # A X^[l-1] per layer
    preact: list[Var]      # pre-activation per layer


def _as_var(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def gcn_forward(params: Sequence[Var], A: Var, X, tape: Tape | None = None) -> GcnTrace:
    """``X^[l] = relu(X^[l-1] W1 + A X^[l-1] W2 + 1 b^T)``; last layer is linear."""
    tape = A.tape if tape is None else tape
    A = _as_var(tape, A)
    H = _as_var(tape, X)
    n = A.shape[0]
    if A.shape != (n, n) or H.shape[0] != n:
        raise DimensionError(f"gcn_forward: adjacency {A.shape} and features {H.shape} disagree")
    layers = _group(params)
    inputs, propagated, preact = [], [], []
    for l, (W1, W2, b) in enumerate(layers):
        AH = A @ H
        Z = tape.add_row(H @ W1 + AH @ W2, b)
        inputs.append(H)
        propagated.append(AH)
        preact.append(Z)
        H = tape.relu(Z) if l < len(layers) - 1 else Z
    return GcnTrace(H, inputs, propagated, preact)


def masked_loss(pred: Var, targets: LabeledTargets, nodes, kind: str) -> Var:
    """Mean per-node loss over ``nodes``; ``cce`` applies a row softmax to ``pred``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ContractError("masked_loss: empty node set")
    if not np.all(targets.mask[nodes]):
        raise ContractError("masked_loss: nodes must be labelled")
    tape = pred.tape
    rows = tape.row_select(pred, rows=nodes)
    y = tape.constant(targets.Y[nodes])
    if kind == "mse":
        total = tape.reduce_sum(tape.square(rows - y))
    elif kind == "cce":
        total = -tape.reduce_sum(tape.log_softmax_rows(rows) * y)
    else:
        raise ContractError(f"unknown loss {kind!r}")
    return total * (1.0 / len(nodes))


def _loss_grad(pred: Var, targets: LabeledTargets, nodes, kind: str) -> Var:
    """d masked_loss / d pred as an ``n x c`` tape value, zero outside ``nodes``."""
    tape = pred.tape
    mask = tape.constant(targets.row_mask(nodes))
    y = tape.constant(targets.Y)
    scale = 1.0 / len(nodes)
    if kind == "mse":
        return ((pred - y) * mask) * (2.0 * scale)
    if kind == "cce":
        return ((tape.softmax_rows(pred) - y) * mask) * scale
    raise ContractError(f"unknown loss {kind!r}")


def inner_grad_gcn(params: Sequence[Var], trace: GcnTrace, A: Var, targets: LabeledTargets,
                   train, kind: str) -> list[Var]:
    """Gradient of the training loss wrt every GCN parameter, in ``params`` order.

    Backpropagation through the layers written out by hand. Relu masks are
    taken from forward values and enter as constants. ``A`` must be symmetric.
    """
    tape = A.tape
    layers = _group(params)
    dZ = _loss_grad(trace.output, targets, train, kind)
    grads: list[list[Var]] = [None] * len(layers)  # type: ignore[list-item]
    for l in range(len(layers) - 1, -1, -1):
        W1, W2, _ = layers[l]
        H, AH = trace.inputs[l], trace.propagated[l]
        grads[l] = [H.T @ dZ, AH.T @ dZ, tape.reduce_sum(dZ, axis=0)]
        if l > 0:
            dH = dZ @ W1.T + A @ (dZ @ W2.T)
            active = tape.constant(trace.preact[l - 1].value > 0)
            dZ = dH * active
    return [g for layer in grads for g in layer]


def gcn_loss(params: Sequence[Var], A: Var, X, targets: LabeledTargets, train, kind: str) -> Var:
    return masked_loss(gcn_forward(params, A, X).output, targets, train, kind)


# --------------------------------------------------------------------------
# Laplacian regularization


def count_edges(A: np.ndarray) -> int:
    return int(np.count_nonzero(np.triu(np.asarray(A), k=1)))


def apply_laplacian(Y: Var, A: Var, deg: Var | None = None) -> Var:
    """``L Y`` with ``L = diag(A 1) - A``, never forming ``L``.

    Pass ``deg = A 1`` when calling repeatedly with the same ``A``.
    """
    tape = Y.tape
    deg = tape.reduce_sum(A, axis=1) if deg is None else deg
    return tape.scale_rows(deg, Y) - A @ Y


def laplacian_regularizer(Y: Var, A: Var) -> Var:
    """Sum over label columns of ``Y_c^T L Y_c``."""
    return Y.tape.reduce_sum(Y * apply_laplacian(Y, A))


def laplacian_reg_objective(Y: Var, A: Var, targets: LabeledTargets, train, lam: float,
                            n_edges: int | None = None, kind: str = "mse") -> Var:
    """``masked_loss(Y, train) + lam / |E| * sum_c Y_c^T L Y_c``."""
    if lam <= 0:
        raise ContractError(f"lambda must be positive, got {lam}")
    n_edges = count_edges(A.value) if n_edges is None else n_edges
    if n_edges <= 0:
        raise ContractError("laplacian regularization needs at least one edge")
    reg = laplacian_regularizer(Y, A)
    return masked_loss(Y, targets, train, kind) + reg * (lam / n_edges)


def inner_grad_labels(Y: Var, A: Var, targets: LabeledTargets, train, lam: float,
                      n_edges: int | None = None, kind: str = "mse", deg: Var | None = None) -> Var:
    """``2/|V_tr| S_in (Y - Y_obs) + 2 lam/|E| L Y`` (mse), softmax residual for cce."""
    if lam < 0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    n_edges = count_edges(A.value) if n_edges is None else n_edges
    if n_edges <= 0:
        raise ContractError("laplacian regularization needs at least one edge")
    data = _loss_grad(Y, targets, train, kind)
    if lam == 0:
        return data
    return data + apply_laplacian(Y, A, deg) * (2.0 * lam / n_edges)
