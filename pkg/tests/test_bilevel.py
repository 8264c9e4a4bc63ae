import numpy as np
import pytest

from scarcegrad import bilevel as bl
from scarcegrad.checks import _TinyDataset, random_instance
from scarcegrad.graph import NodeSplit, SupportPattern, WeightedGraph, edge_distance
from scarcegrad.models import LabeledTargets
from scarcegrad.tensor import ContractError, Tape, grad_check


class _ClassDataset:
    task = "classification"

    def __init__(self, X, A_obs, labels, split):
        self.X, self.A_obs, self.labels, self.split = X, A_obs, labels, split
        mask = np.zeros(len(X), dtype=bool)
        mask[split.labelled()] = True
        self.targets = LabeledTargets(labels, mask)


def _path_dataset(n=14, c=2, seed=0):
    # path graph with labels on the first two nodes (train) and node 2 (outer)
    rng = np.random.default_rng(seed)
    s = SupportPattern(n, [[i, i + 1] for i in range(n - 1)])
    X = rng.normal(size=(n, 3))
    labels = np.eye(c)[rng.integers(0, c, size=n)]
    split = NodeSplit([0, 1], [2], list(range(3, n, 2)), list(range(4, n, 2)))
    return _ClassDataset(X, WeightedGraph(s, np.ones(s.m)), labels, split), s


def _regression_dataset(seed=0, n=6):
    rng = np.random.default_rng(seed)
    A, X, targets, split = random_instance(rng, n=n, c=1)
    labels = np.where(targets.mask[:, None], targets.Y, 0.0)
    return _TinyDataset(X, WeightedGraph.from_adjacency(A), labels, split)


def test_adam_matches_scalar_recurrence():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    grads = [0.5, -1.0, 2.0, 0.0, 0.3]
    x, m, v = 1.0, 0.0, 0.0
    ref = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        ref.append(x)
    opt = bl.SmoothOptimizer("adam", lr)
    p = [np.array([[1.0]])]
    for g, r in zip(grads, ref):
        p = opt.step(p, [np.array([[g]])])
        assert p[0][0, 0] == pytest.approx(r, rel=1e-14)


def test_adam_on_tape_equals_plain_arrays():
    rng = np.random.default_rng(0)
    gs = [rng.normal(size=(2, 3)) for _ in range(4)]
    plain = bl.SmoothOptimizer("adam", 0.05)
    taped = bl.SmoothOptimizer("adam", 0.05)
    tape = Tape()
    p, q = [np.ones((2, 3))], [tape.constant(np.ones((2, 3)))]
    for g in gs:
        p = plain.step(p, [g])
        q = taped.step(q, [tape.constant(g)])
    assert np.array_equal(p[0], q[0].value)


def test_gd_step_and_bad_optimizer():
    opt = bl.SmoothOptimizer("gd", 0.5)
    assert opt.step([np.array([[2.0]])], [np.array([[1.0]])])[0][0, 0] == 1.5
    with pytest.raises(ContractError):
        bl.SmoothOptimizer("sgd")
    with pytest.raises(ContractError):
        bl.SmoothOptimizer("adam", 0.0)


def test_outer_config_aggregates_problems():
    with pytest.raises(ContractError) as exc:
        bl.OuterConfig(tau_in=0, lr_in=-1.0, gamma=-2.0)
    msg = str(exc.value)
    assert "tau_in" in msg and "lr_in" in msg and "gamma" in msg


@pytest.mark.parametrize("inner,opt", [(bl.LaplacianInner(0.7), "gd"), (bl.LaplacianInner(0.7), "adam"),
                                       (bl.GcnInner((4,)), "gd")])
def test_hypergradient_matches_finite_differences(inner, opt):
    ds = _regression_dataset(1)
    support = ds.A_obs.support
    cfg = bl.OuterConfig(inner=inner, tau_in=5, tau_out=1, lr_in=0.05, inner_opt=opt, gamma=0.3)
    param = bl.DirectEdges(support, ds.A_obs.weights)
    res = bl.hypergradient(cfg, ds, param, iteration=3)

    def F(tape, w):
        Av = tape.scatter_sym(w, rows=support.rows, cols=support.cols, n=support.n)
        out = bl.unroll_inner(inner, Av, ds, cfg, tape, bl.inner_seed(0, 3), n_edges=support.m)
        return bl.outer_objective(out.pred, ds, cfg.gamma, Av)

    tape = Tape()
    w = tape.leaf(ds.A_obs.weights[:, None])
    assert np.array_equal(tape.backward(F(tape, w), [w])[w][:, 0], res.edge_adjoint)
    assert grad_check(F, [ds.A_obs.weights[:, None]]) <= 1e-5


def test_far_edges_get_exactly_zero_hypergradient():
    ds, s = _path_dataset()
    cfg = bl.OuterConfig(inner=bl.GcnInner((4,)), tau_in=20, tau_out=1, lr_in=0.05)
    res = bl.hypergradient(cfg, ds, bl.DirectEdges(s, np.ones(s.m)))
    d = edge_distance(s, ds.split.train, ds.split.outer, "gcn")
    g = np.abs(res.edge_signal)
    assert np.all(g[d >= 2] == 0.0)
    assert np.max(g[d < 2]) > 1e-8


def test_far_edges_do_not_move_inner_weights():
    ds, s = _path_dataset()
    cfg = bl.OuterConfig(inner=bl.GcnInner((4,)), tau_in=30, tau_out=1, lr_in=0.05)
    d_tr = edge_distance(s, ds.split.train, ds.split.train, "gcn")
    far = np.flatnonzero(d_tr >= 2)

    def trajectory(w):
        tape = Tape()
        A = tape.constant(WeightedGraph(s, w).adjacency())
        res = bl.unroll_inner(cfg.inner, A, ds, cfg, tape, bl.inner_seed(0, 0), keep_trajectory=True)
        return [np.concatenate([p.value.ravel() for p in step]) for step in res.trajectory]

    base = trajectory(np.ones(s.m))
    w = np.ones(s.m)
    w[far] += 1e-4
    for a, b in zip(base, trajectory(w)):
        assert np.max(np.abs(a - b)) <= 1e-9


def test_hypergradient_is_deterministic():
    ds = _regression_dataset(2)
    cfg = bl.OuterConfig(inner=bl.GcnInner((4,)), tau_in=10, tau_out=1)
    param = bl.DirectEdges(ds.A_obs.support, ds.A_obs.weights)
    a = bl.hypergradient(cfg, ds, param, 5)
    b = bl.hypergradient(cfg, ds, param, 5)
    assert a.edge_adjoint.tobytes() == b.edge_adjoint.tobytes()


def test_degree_regularizer_gradient():
    rng = np.random.default_rng(3)
    A = rng.uniform(0.2, 1.0, size=(5, 5))
    A = A + A.T
    assert grad_check(lambda t, Av: bl.degree_regularizer(Av, 0.7), [A]) <= 1e-6
    tape = Tape()
    v = bl.degree_regularizer(tape.constant(A), 0.7).value[0, 0]
    assert v == pytest.approx(-0.7 * np.sum(np.log(A.sum(axis=1) + 1e-8)))


def test_g2g_weights_and_tangent():
    ds = _regression_dataset(4, n=7)
    support = ds.A_obs.support
    rng = np.random.default_rng(0)
    param = bl.LatentG2G.init(support, ds.X.shape[1], [5, 5], rng, last_scale=1.0)
    w = param.edge_weights(ds.X)
    assert w.shape == (support.m,) and np.all(w >= 0)
    direction = [rng.normal(size=a.shape) for a in param.arrays()]
    h = 1e-6
    plus = param.replace([a + h * d for a, d in zip(param.arrays(), direction)]).edge_weights(ds.X)
    minus = param.replace([a - h * d for a, d in zip(param.arrays(), direction)]).edge_weights(ds.X)
    fd = (plus - minus) / (2 * h)
    assert np.allclose(param.tangent(ds.X, direction), fd, atol=1e-7)


def test_direct_edges_projection():
    s = SupportPattern(3, [[0, 1], [1, 2]])
    p = bl.DirectEdges(s, [-0.5, 3.0], lo=0.0, hi=2.0).project()
    assert p.weights.tolist() == [0.0, 2.0]


def test_count_refined_examples():
    assert bl.count_refined(np.full(7, 0.3)) == 7
    assert bl.count_refined(np.array([1.0] + [1e-6] * 9)) == 1
    assert bl.count_refined(np.zeros(5)) == 0


def test_evaluate_examples():
    ds, _ = _path_dataset(n=40)
    assert bl.evaluate(ds.labels, ds, "test") == 1.0
    accs = []
    for seed in range(10):
        pred = np.random.default_rng(seed).uniform(size=ds.labels.shape)
        accs.append(bl.evaluate(pred, ds, "val"))
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_outer_loop_runs_and_tracks_best():
    ds = _regression_dataset(5, n=10)
    cfg = bl.OuterConfig(inner=bl.LaplacianInner(1.0), tau_in=20, tau_out=4, lr_in=0.5, lr_out=0.05,
                         snapshots=(0, 4))
    out = bl.outer_loop(cfg, ds, bl.DirectEdges(ds.A_obs.support, ds.A_obs.weights))
    assert [r["iteration"] for r in out.history] == [0, 1, 2, 3, 4]
    assert set(out.snapshots) == {0, 4}
    vals = [r["val"] for r in out.history]
    assert out.best_iteration == int(np.argmin(vals))
    assert len(out.param_history) == 5
    assert np.all(out.final.weights >= 0)


def test_divergence_halves_step_then_raises():
    ds = _regression_dataset(6)
    cfg = bl.OuterConfig(inner=bl.LaplacianInner(1.0), tau_in=200, tau_out=2, lr_in=1e6, inner_opt="gd")
    with pytest.raises(bl.DivergenceError) as exc:
        bl.outer_loop(cfg, ds, bl.DirectEdges(ds.A_obs.support, ds.A_obs.weights))
    assert exc.value.outer_iteration == 0
