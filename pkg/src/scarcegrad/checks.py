"""Finite-difference sweeps over every tape primitive and both inner models."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import bilevel as bl
from .graph import NodeSplit, SupportPattern, WeightedGraph
from .models import (GcnParams, LabeledTargets, gcn_forward, gcn_loss, inner_grad_gcn,
                     laplacian_reg_objective)
from .tensor import PRIMITIVES, Tape, Var, grad_check

KINK = 1e-4


def _away_from(x: np.ndarray, point: float, rng) -> np.ndarray:
    # push entries out of the KINK-neighbourhood of a non-smooth point
    close = np.abs(x - point) < KINK
    x[close] = point + np.sign(rng.uniform(-1, 1, size=close.sum())) * rng.uniform(0.1, 1.0, size=close.sum())
    return x


def _weighted_sum(tape: Tape, out: Var, C: np.ndarray) -> Var:
    return tape.reduce_sum(out * tape.constant(C))


def _unary(name, make, **attrs):
    def build(rng):
        x = make(rng)
        C = rng.normal(size=PRIMITIVES[name].forward(x, **attrs).shape)
        return [x], lambda tape, a: _weighted_sum(tape, tape.record(name, a, **attrs), C)
    return build


def _binary(name, make_a, make_b, **attrs):
    def build(rng):
        a, b = make_a(rng), make_b(rng)
        C = rng.normal(size=PRIMITIVES[name].forward(a, b, **attrs).shape)
        return [a, b], lambda tape, x, y: _weighted_sum(tape, tape.record(name, x, y, **attrs), C)
    return build


def _normal(*shape):
    return lambda rng: rng.normal(size=shape)


def _positive(*shape):
    return lambda rng: rng.uniform(0.5, 2.0, size=shape)


def _kinked(point, *shape):
    return lambda rng: _away_from(rng.normal(size=shape), point, rng)


def _nonzero(*shape):
    return lambda rng: rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 2.0, size=shape)


def _primitive_cases() -> dict[str, Callable]:
    mask = np.array([[True, False, False], [False, True, False], [False, False, False]])
    rows, cols = np.array([0, 0, 1, 2]), np.array([1, 3, 2, 3])
    cases = {
        "matmul": _binary("matmul", _normal(3, 4), _normal(4, 2)),
        "add": _binary("add", _normal(3, 3), _normal(3, 3)),
        "subtract": _binary("subtract", _normal(3, 3), _normal(3, 3)),
        "hadamard": _binary("hadamard", _normal(3, 3), _normal(3, 3)),
        "divide": _binary("divide", _normal(3, 3), _nonzero(3, 3)),
        "scale": _unary("scale", _normal(3, 3), factor=-1.7),
        "add_row": _binary("add_row", _normal(3, 4), _normal(1, 4)),
        "scale_rows": _binary("scale_rows", _normal(3, 1), _normal(3, 4)),
        "relu": _unary("relu", _kinked(0.0, 3, 3)),
        "clamp_min": _unary("clamp_min", _kinked(0.1, 3, 3), lo=0.1),
        "abs": _unary("abs", _kinked(0.0, 3, 3)),
        "square": _unary("square", _normal(3, 3)),
        "sqrt": _unary("sqrt", _positive(3, 3)),
        "exp": _unary("exp", _normal(3, 3)),
        "log": _unary("log", _positive(3, 3)),
        "softmax_rows": _unary("softmax_rows", _normal(3, 4)),
        "log_softmax_rows": _unary("log_softmax_rows", _normal(3, 4)),
        "transpose": _unary("transpose", _normal(3, 4)),
        "row_select": _unary("row_select", _normal(4, 3), rows=[0, 2, 2]),
        "reduce_sum": _unary("reduce_sum", _normal(3, 4)),
        "reduce_sum[axis=0]": _unary("reduce_sum", _normal(3, 4), axis=0),
        "reduce_sum[axis=1]": _unary("reduce_sum", _normal(3, 4), axis=1),
        "reduce_mean": _unary("reduce_mean", _normal(3, 4)),
        "reduce_mean[axis=0]": _unary("reduce_mean", _normal(3, 4), axis=0),
        "reduce_mean[axis=1]": _unary("reduce_mean", _normal(3, 4), axis=1),
        "masked_fill": _unary("masked_fill", _normal(3, 3), mask=mask, value=0.5),
        "scatter_sym": _unary("scatter_sym", _normal(4, 1), rows=rows, cols=cols, n=4),
    }
    missing = set(PRIMITIVES) - {k.split("[")[0] for k in cases}
    assert not missing, f"primitives without a gradient check: {sorted(missing)}"
    return cases


# --------------------------------------------------------------------------
# inner models


def random_instance(rng, n: int = 6, p: int = 3, c: int = 1, kind: str = "mse"):
    """Small connected weighted graph with features, targets and a split."""
    while True:
        A = (rng.uniform(size=(n, n)) < 0.5) * rng.uniform(0.2, 1.0, size=(n, n))
        A = np.triu(A, 1)
        A = A + A.T
        if SupportPattern.from_adjacency(A).is_connected():
            break
    X = rng.normal(size=(n, p))
    if kind == "cce":
        Y = np.eye(c)[rng.integers(0, c, size=n)]
    else:
        Y = rng.normal(size=(n, c))
    perm = rng.permutation(n)
    split = NodeSplit(perm[:2], perm[2:4], perm[4:5], perm[5:])
    mask = np.zeros(n, dtype=bool)
    mask[split.labelled()] = True
    return A, X, LabeledTargets(Y, mask), split


def _gcn_near_kink(params: GcnParams, A: np.ndarray, X: np.ndarray) -> bool:
    tape = Tape()
    tr = gcn_forward(params.on(tape), tape.constant(A), X)
    return any(np.any(np.abs(z.value) < KINK) for z in tr.preact[:-1])


def _gcn_case(kind: str, wrt: str):
    def build(rng):
        c = 3 if kind == "cce" else 1
        while True:
            A, X, targets, split = random_instance(rng, c=c, kind=kind)
            params = GcnParams.xavier([X.shape[1], 4, c], rng)
            if not _gcn_near_kink(params, A, X):
                break
        train = split.train
        if wrt == "A":
            def f(tape, Av):
                return gcn_loss(params.on(tape), Av, X, targets, train, kind)
            return [A], f

        def f(tape, *P):
            return gcn_loss(list(P), tape.constant(A), X, targets, train, kind)
        return params.arrays(), f
    return build


def _gcn_inner_grad_case(kind: str):
    # inner_grad_gcn as the gradient of a linear functional: <grad, C> differentiated wrt A
    def build(rng):
        c = 3 if kind == "cce" else 1
        while True:
            A, X, targets, split = random_instance(rng, c=c, kind=kind)
            params = GcnParams.xavier([X.shape[1], 4, c], rng)
            if not _gcn_near_kink(params, A, X):
                break
        Cs = [rng.normal(size=a.shape) for a in params.arrays()]

        def f(tape, Av):
            P = params.on(tape)
            tr = gcn_forward(P, Av, X)
            grads = inner_grad_gcn(P, tr, Av, targets, split.train, kind)
            total = None
            for g, C in zip(grads, Cs):
                term = _weighted_sum(tape, g, C)
                total = term if total is None else total + term
            return total
        return [A], f
    return build


def _laplacian_case(wrt: str):
    def build(rng):
        A, X, targets, split = random_instance(rng, c=2)
        Y = rng.normal(size=(A.shape[0], 2))
        lam = rng.uniform(0.1, 2.0)
        m = int(np.count_nonzero(np.triu(A, 1)))
        if wrt == "A":
            def f(tape, Av):
                return laplacian_reg_objective(tape.constant(Y), Av, targets, split.train, lam, m)
            return [A], f

        def f(tape, Yv):
            return laplacian_reg_objective(Yv, tape.constant(A), targets, split.train, lam, m)
        return [Y], f
    return build


def _pipeline_case(model: str, opt: str):
    # hypergradient of the whole unrolled pipeline wrt the edge weights
    def build(rng):
        kind = "mse"
        A, X, targets, split = random_instance(rng, c=1, kind=kind)
        support = SupportPattern.from_adjacency(A)
        labels = np.where(targets.mask[:, None], targets.Y, 0.0)
        ds = _TinyDataset(X, WeightedGraph.from_adjacency(A), labels, split)
        inner = bl.GcnInner((4,)) if model == "gcn" else bl.LaplacianInner(0.7)
        cfg = bl.OuterConfig(inner=inner, tau_in=3, tau_out=1, lr_in=0.05, inner_opt=opt)
        seed = int(rng.integers(1 << 30))

        def f(tape, w):
            Av = tape.scatter_sym(w, rows=support.rows, cols=support.cols, n=support.n)
            res = bl.unroll_inner(inner, Av, ds, cfg, tape, np.random.default_rng(seed), n_edges=support.m)
            return bl.outer_objective(res.pred, ds, 0.0, Av)
        w0 = A[support.rows, support.cols][:, None]
        return [w0], f
    return build


class _TinyDataset:
    task = "regression"

    def __init__(self, X, A_obs, labels, split):
        self.X, self.A_obs, self.labels, self.split = X, A_obs, labels, split
        mask = np.zeros(len(X), dtype=bool)
        mask[split.labelled()] = True
        self.targets = LabeledTargets(labels, mask)


def _model_cases() -> dict[str, Callable]:
    return {
        "gcn_loss[mse] wrt A": _gcn_case("mse", "A"),
        "gcn_loss[cce] wrt A": _gcn_case("cce", "A"),
        "gcn_loss[mse] wrt W": _gcn_case("mse", "W"),
        "gcn_loss[cce] wrt W": _gcn_case("cce", "W"),
        "inner_grad_gcn[mse]": _gcn_inner_grad_case("mse"),
        "inner_grad_gcn[cce]": _gcn_inner_grad_case("cce"),
        "laplacian_obj wrt Y": _laplacian_case("Y"),
        "laplacian_obj wrt A": _laplacian_case("A"),
        "unrolled gcn (gd)": _pipeline_case("gcn", "gd"),
        "unrolled laplacian (gd)": _pipeline_case("laplacian", "gd"),
        "unrolled laplacian (adam)": _pipeline_case("laplacian", "adam"),
    }


def run_grad_checks(instances: int = 100, seed: int = 0,
                    include_models: bool = True) -> Iterator[tuple[str, float]]:
    """Yield ``(case, worst relative error)`` over ``instances`` random draws per case."""
    cases = dict(_primitive_cases())
    if include_models:
        cases.update(_model_cases())
    for k, (name, build) in enumerate(cases.items()):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        worst = 0.0
        for _ in range(instances):
            point, f = build(rng)
            worst = max(worst, grad_check(f, point))
        yield name, worst
