"""Outer problem: unrolled inner training, hypergradients and the outer loop.

The adjacency is produced from outer parameters on the tape, the inner model
is trained for ``tau_in`` recorded optimizer steps, and one reverse sweep from
the outer objective gives the hypergradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .graph import SupportPattern
from .models import (GcnParams, LabeledTargets, gcn_forward, inner_grad_gcn, inner_grad_labels,
                     masked_loss)
from .tensor import ContractError, DimensionError, Tape, Var

log = logging.getLogger(__name__)

DEG_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Non-finite inner loss; ``iteration`` is the inner step where it showed up."""

    def __init__(self, iteration: int, outer_iteration: int | None = None):
        self.iteration = iteration
        self.outer_iteration = outer_iteration
        where = "" if outer_iteration is None else f" (outer iteration {outer_iteration})"
        super().__init__(f"inner loss became non-finite at step {iteration}{where}")


# --------------------------------------------------------------------------
# optimizers


def _sqrt(x):
    return x.tape.sqrt(x) if isinstance(x, Var) else np.sqrt(x)


@dataclass
class SmoothOptimizer:
    """GD or Adam acting on tape variables or on plain arrays.

    On tape variables every update is recorded, so gradients flow through it.
    Adam follows the usual bias-corrected form with ``sqrt(v_hat) + eps``.
    """

    kind: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list | None = field(default=None, repr=False)
    v: list | None = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.kind not in ("gd", "adam"):
            raise ContractError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ContractError(f"step size must be positive, got {self.lr}")

    def reset(self) -> None:
        self.m = self.v = None
        self.t = 0

    def step(self, params: Sequence, grads: Sequence) -> list:
        if len(params) != len(grads):
            raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
        if self.kind == "gd":
            self.t += 1
            return [p - g * self.lr for p, g in zip(params, grads)]
        if self.m is None:
            self.m = [g * (1.0 - self.beta1) for g in grads]
            self.v = [(g * g) * (1.0 - self.beta2) for g in grads]
        else:
            if len(self.m) != len(grads):
                raise DimensionError("optimizer state does not match the parameter list")
            self.m = [m * self.beta1 + g * (1.0 - self.beta1) for m, g in zip(self.m, grads)]
            self.v = [v * self.beta2 + (g * g) * (1.0 - self.beta2) for v, g in zip(self.v, grads)]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for p, m, v in zip(params, self.m, self.v):
            denom = _sqrt(v * (1.0 / c2)) + self.eps
            out.append(p - (m / denom) * (self.lr / c1))
        return out


def optimizer_step(opt: SmoothOptimizer, params: Sequence, grads: Sequence) -> list:
    return opt.step(params, grads)


# --------------------------------------------------------------------------
# outer parameterizations


@dataclass
class DirectEdges:
    """One free weight per support edge, clamped to ``[lo, hi]`` after each step."""

    support: SupportPattern
    weights: np.ndarray
    lo: float = 0.0
    hi: float = 1e6

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.weights) != self.support.m:
            raise DimensionError(f"{len(self.weights)} weights for {self.support.m} edges")

    @classmethod
    def uniform(cls, support: SupportPattern, rng: np.random.Generator, scale: float = 1.0,
                **kw) -> "DirectEdges":
        return cls(support, scale * rng.uniform(0.0, 1.0, size=support.m), **kw)

    def arrays(self) -> list[np.ndarray]:
        return [self.weights[:, None]]

    def replace(self, arrays: Sequence[np.ndarray]) -> "DirectEdges":
        return replace(self, weights=np.asarray(arrays[0]).reshape(-1))

    def project(self) -> "DirectEdges":
        return replace(self, weights=np.clip(self.weights, self.lo, self.hi))

    def edge_weights(self, X=None) -> np.ndarray:
        return self.weights.copy()


def pair_features(X: np.ndarray, support: SupportPattern) -> np.ndarray:
    """``(X_i - X_j)**2`` entrywise, one row per support edge."""
    X = np.asarray(X, dtype=np.float64)
    return (X[support.rows] - X[support.cols]) ** 2


@dataclass
class LatentG2G:
    """Edge weights ``relu(alpha((X_i - X_j)**2))`` for an MLP ``alpha``.

    ``layers`` holds ``(W, b)`` pairs with ``b`` a ``1 x d`` row; hidden
    layers use relu and the scalar output goes through relu as well.
    """

    support: SupportPattern
    layers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def init(cls, support: SupportPattern, p: int, hidden: Sequence[int], rng: np.random.Generator,
             last_scale: float = 1.0) -> "LatentG2G":
        # torch.nn.Linear default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for W and b
        dims = [p, *hidden, 1]
        layers = []
        for l, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / math.sqrt(d_in)
            W = rng.uniform(-bound, bound, size=(d_in, d_out))
            b = rng.uniform(-bound, bound, size=(1, d_out))
            if l == len(dims) - 2:
                W, b = W * last_scale, b * last_scale
            layers.append((W, b))
        return cls(support, layers)

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def replace(self, arrays: Sequence[np.ndarray]) -> "LatentG2G":
        it = iter(arrays)
        return LatentG2G(self.support, [(np.asarray(W), np.asarray(b)) for W, b in zip(it, it)])

    def project(self) -> "LatentG2G":
        return self

    def edge_weights(self, X) -> np.ndarray:
        H = pair_features(X, self.support)
        for W, b in self.layers:
            H = np.maximum(H @ W + b, 0.0)
        return H[:, 0]

    def tangent(self, X, direction: Sequence[np.ndarray]) -> np.ndarray:
        """Directional derivative of every edge weight along ``direction`` in parameter space."""
        H = pair_features(X, self.support)
        dH = np.zeros_like(H)
        it = iter(direction)
        for (W, b), dW, db in zip(self.layers, it, it):
            Z = H @ W + b
            dZ = dH @ W + H @ dW + db
            active = Z > 0
            H, dH = np.where(active, Z, 0.0), np.where(active, dZ, 0.0)
        return dH[:, 0]


def materialize_adjacency(param, X, tape: Tape, requires_grad: bool = True) -> tuple[Var, list[Var], Var]:
    """Record the adjacency built from ``param``.

    Returns ``(A, leaves, w)`` where ``leaves`` are the outer parameters on
    the tape and ``w`` is the ``m x 1`` vector of edge weights.
    """
    s = param.support
    leaves = [tape.leaf(a, requires_grad) for a in param.arrays()]
    if isinstance(param, DirectEdges):
        w = leaves[0]
    elif isinstance(param, LatentG2G):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] != s.n or X.shape[1] != param.layers[0][0].shape[0]:
            raise DimensionError(f"G2G expects {param.layers[0][0].shape[0]} features, got {X.shape}")
        H = tape.constant(pair_features(X, s))
        it = iter(leaves)
        for W, b in zip(it, it):
            H = tape.relu(tape.add_row(H @ W, b))
        w = H
    else:
        raise ContractError(f"unknown outer parameterization {type(param).__name__}")
    A = tape.scatter_sym(w, rows=s.rows, cols=s.cols, n=s.n)
    return A, leaves, w


# --------------------------------------------------------------------------
# inner problems and configuration


@dataclass(frozen=True)
class GcnInner:
    hidden: tuple[int, ...] = (8,)

    @property
    def name(self) -> str:
        return "gcn"


@dataclass(frozen=True)
class LaplacianInner:
    lam: float = 1.0
    loss: str = "mse"

    @property
    def name(self) -> str:
        return "laplacian"


@dataclass(frozen=True)
class OuterConfig:
    inner: Any = GcnInner()
    tau_in: int = 200
    tau_out: int = 150
    lr_in: float = 1e-2
    lr_out: float = 1e-2
    gamma: float = 0.0
    seed: int = 0
    inner_opt: str = "adam"
    outer_opt: str = "adam"
    snapshots: tuple[int, ...] = (9,)

    def __post_init__(self):
        problems = []
        if self.tau_in < 1:
            problems.append(f"tau_in must be >= 1 (got {self.tau_in})")
        if self.tau_out < 1:
            problems.append(f"tau_out must be >= 1 (got {self.tau_out})")
        if not self.lr_in > 0:
            problems.append(f"lr_in must be > 0 (got {self.lr_in})")
        if not self.lr_out > 0:
            problems.append(f"lr_out must be > 0 (got {self.lr_out})")
        if self.gamma < 0:
            problems.append(f"gamma must be >= 0 (got {self.gamma})")
        if isinstance(self.inner, LaplacianInner) and not self.inner.lam > 0:
            problems.append(f"lambda must be > 0 (got {self.inner.lam})")
        if not isinstance(self.inner, (GcnInner, LaplacianInner)):
            problems.append(f"unknown inner model {self.inner!r}")
        if problems:
            raise ContractError("; ".join(problems))


def task_loss(dataset) -> str:
    return "cce" if dataset.task == "classification" else "mse"


def inner_seed(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, iteration)))


def init_seed(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))


@dataclass
class UnrollResult:
    pred: Var
    params: list[Var]
    trajectory: list[list[Var]]
    losses: list[float]


def _finite_or_raise(value: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(value)):
        raise DivergenceError(step)


def unroll_inner(inner, A: Var, dataset, cfg: OuterConfig, tape: Tape,
                 rng: np.random.Generator, lr_in: float | None = None,
                 n_edges: int | None = None, keep_trajectory: bool = False) -> UnrollResult:
    """Record ``tau_in`` inner optimizer steps and return the trained predictions.

    ``inner`` is a ``GcnInner`` or ``LaplacianInner``; fresh inner parameters
    are drawn from ``rng``. The loss tracked for divergence is the training
    loss before each step.
    """
    # overflow on a diverging run is expected and caught by the finite checks
    with np.errstate(over="ignore", invalid="ignore"):
        return _unroll(inner, A, dataset, cfg, tape, rng, lr_in, n_edges, keep_trajectory)


def _unroll(inner, A, dataset, cfg, tape, rng, lr_in, n_edges, keep_trajectory) -> UnrollResult:
    lr = cfg.lr_in if lr_in is None else lr_in
    opt = SmoothOptimizer(cfg.inner_opt, lr)
    targets: LabeledTargets = dataset.targets
    train = dataset.split.train
    trajectory, losses = [], []
    if isinstance(inner, GcnInner):
        kind = task_loss(dataset)
        dims = [dataset.X.shape[1], *inner.hidden, targets.c]
        params = GcnParams.xavier(dims, rng).on(tape, requires_grad=False)
        X = tape.constant(dataset.X)
        for step in range(cfg.tau_in):
            trace = gcn_forward(params, A, X)
            loss = masked_loss(trace.output, targets, train, kind)
            losses.append(float(loss.value[0, 0]))
            _finite_or_raise(trace.output.value, step)
            _finite_or_raise(loss.value, step)
            grads = inner_grad_gcn(params, trace, A, targets, train, kind)
            params = opt.step(params, grads)
            if keep_trajectory:
                trajectory.append(params)
        pred = gcn_forward(params, A, X).output
    elif isinstance(inner, LaplacianInner):
        if n_edges is None:
            raise ContractError("laplacian inner problem needs the edge count |E|")
        Y = tape.constant(rng.uniform(0.0, 1.0, size=targets.Y.shape))
        deg = tape.reduce_sum(A, axis=1)
        params = [Y]
        for step in range(cfg.tau_in):
            Y = params[0]
            _finite_or_raise(Y.value, step)
            g = inner_grad_labels(Y, A, targets, train, inner.lam, n_edges, inner.loss, deg=deg)
            params = opt.step(params, [g])
            if keep_trajectory:
                trajectory.append(params)
        pred = params[0]
        _finite_or_raise(pred.value, cfg.tau_in)
    else:
        raise ContractError(f"unknown inner model {inner!r}")
    return UnrollResult(pred, params, trajectory, losses)


def degree_regularizer(A: Var, gamma: float) -> Var:
    """``-gamma * sum_i log(deg_i + 1e-8)``."""
    tape = A.tape
    deg = tape.reduce_sum(A, axis=1) + DEG_EPS
    return tape.reduce_sum(tape.log(deg)) * (-gamma)


def outer_objective(pred: Var, dataset, gamma: float, A: Var, kind: str | None = None) -> Var:
    if gamma < 0:
        raise ContractError(f"gamma must be nonnegative, got {gamma}")
    kind = task_loss(dataset) if kind is None else kind
    F = masked_loss(pred, dataset.targets, dataset.split.outer, kind)
    if gamma > 0:
        F = F + degree_regularizer(A, gamma)
    return F


# --------------------------------------------------------------------------
# hypergradient


@dataclass
class HypergradResult:
    F_out: float
    grads: list[np.ndarray]     # per outer parameter array
    edge_adjoint: np.ndarray    # dF/dw_e with the edge weights as independent variables
    edge_signal: np.ndarray     # what each edge receives from this step (see hypergradient)
    weights: np.ndarray         # current edge weights
    pred: np.ndarray            # trained inner predictions
    inner_losses: list[float]


def hypergradient(cfg: OuterConfig, dataset, param, iteration: int = 0,
                  lr_in: float | None = None) -> HypergradResult:
    """Differentiate the outer objective through ``tau_in`` unrolled inner steps.

    ``edge_signal`` is the edge-weight hypergradient for ``DirectEdges``; for
    ``LatentG2G`` it is the change of every edge weight along the parameter
    hypergradient, i.e. the signal an edge receives through the shared model.
    """
    tape = Tape()
    A, leaves, w = materialize_adjacency(param, dataset.X, tape)
    rng = inner_seed(cfg.seed, iteration)
    res = unroll_inner(cfg.inner, A, dataset, cfg, tape, rng, lr_in=lr_in, n_edges=param.support.m)
    F = outer_objective(res.pred, dataset, cfg.gamma, A)
    if not np.isfinite(F.value[0, 0]):
        raise DivergenceError(cfg.tau_in, iteration)
    g = tape.backward(F, [*leaves, w])
    grads = [g[v] for v in leaves]
    adj = g[w][:, 0]
    if isinstance(param, LatentG2G):
        signal = param.tangent(dataset.X, grads)
    else:
        signal = adj.copy()
    return HypergradResult(float(F.value[0, 0]), grads, adj, signal, w.value[:, 0].copy(),
                           res.pred.value.copy(), res.losses)


def predict(cfg: OuterConfig, dataset, param, iteration: int = 0,
            lr_in: float | None = None) -> np.ndarray:
    """Trained inner predictions for the current outer parameters (no backward)."""
    tape = Tape()
    A, _, _ = materialize_adjacency(param, dataset.X, tape, requires_grad=False)
    res = unroll_inner(cfg.inner, A, dataset, cfg, tape, inner_seed(cfg.seed, iteration),
                       lr_in=lr_in, n_edges=param.support.m)
    return res.pred.value.copy()


# --------------------------------------------------------------------------
# metrics and the outer loop


def evaluate(pred: np.ndarray, dataset, subset: str) -> float:
    """Accuracy (classification) or mean squared error (regression) on one split."""
    nodes = dataset.split.subset(subset)
    if len(nodes) == 0:
        raise ContractError(f"empty subset {subset!r}")
    pred = np.asarray(pred)
    truth = dataset.labels[nodes]
    if dataset.task == "classification":
        return float(np.mean(np.argmax(pred[nodes], axis=1) == np.argmax(truth, axis=1)))
    return float(np.mean(np.sum((pred[nodes] - truth) ** 2, axis=1)))


def count_refined(weights: np.ndarray, rel: float = 0.01) -> int:
    """Edges whose weight exceeds ``rel`` times the largest weight."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        return 0
    top = w.max()
    if not top > 0:
        return 0
    return int(np.count_nonzero(w > rel * top))


@dataclass
class OuterResult:
    best: Any
    best_iteration: int
    history: list[dict]
    weight_history: list[np.ndarray]
    snapshots: dict[int, HypergradResult]
    final: Any
    lr_in: float
    events: list[str]
    param_history: list[list[np.ndarray]]   # arrays of every iterate


def _evaluate_iterate(cfg, dataset, param, it, lr_in, predict_only):
    if predict_only:
        return None, predict(cfg, dataset, param, it, lr_in)
    res = hypergradient(cfg, dataset, param, it, lr_in)
    return res, res.pred


def _better(task: str, new: float, old: float) -> bool:
    return new > old if task == "classification" else new < old


def outer_loop(cfg: OuterConfig, dataset, param, snapshots: Sequence[int] | None = None,
               progress=None) -> OuterResult:
    """Run ``tau_out`` outer steps and keep the iterate with the best validation metric.

    Iterate ``t`` (``0 <= t <= tau_out``) is the outer parameter after ``t``
    updates; the last one is only evaluated unless it is a snapshot. On a
    non-finite inner loss the inner step size is halved once and the unroll
    retried; a second divergence is raised.
    """
    snapshots = tuple(cfg.snapshots if snapshots is None else snapshots)
    opt = SmoothOptimizer(cfg.outer_opt, cfg.lr_out)
    lr_in = cfg.lr_in
    halved = False
    history, weights, events, iterates = [], [], [], []
    snaps: dict[int, HypergradResult] = {}
    best, best_it, best_val = param, 0, None

    for it in range(cfg.tau_out + 1):
        final = it == cfg.tau_out
        diverged = False
        while True:
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    res, pred = _evaluate_iterate(cfg, dataset, param, it, lr_in,
                                                  final and it not in snapshots)
                break
            except DivergenceError as exc:
                exc.outer_iteration = it
                if halved:
                    raise
                halved, diverged = True, True
                lr_in *= 0.5
                msg = f"outer iteration {it}: {exc}; inner step size halved to {lr_in:g}"
                events.append(msg)
                log.warning(msg)
        w = param.edge_weights(dataset.X)
        weights.append(w)
        iterates.append([np.array(a, copy=True) for a in param.arrays()])
        row = {
            "iteration": it,
            "F_out": float("nan") if res is None else res.F_out,
            "out": evaluate(pred, dataset, "outer"),
            "val": evaluate(pred, dataset, "val") if len(dataset.split.val) else float("nan"),
            "test": evaluate(pred, dataset, "test") if len(dataset.split.test) else float("nan"),
            "refined": count_refined(w),
            "diverged": int(diverged),
        }
        history.append(row)
        if best_val is None or _better(dataset.task, row["val"], best_val):
            best, best_it, best_val = param, it, row["val"]
        if res is not None and it in snapshots:
            snaps[it] = res
        if progress is not None:
            progress(row)
        if final:
            break
        new = opt.step(param.arrays(), res.grads)
        param = param.replace(new).project()
    return OuterResult(best, best_it, history, weights, snaps, param, lr_in, events, iterates)
