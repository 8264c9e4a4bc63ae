import math

import numpy as np
import pytest

from scarcegrad import neumann as nm
from scarcegrad.graph import SupportPattern, hop_distances
from scarcegrad.tensor import ContractError


def _connected_graph(rng, n, p=0.25, weighted=True):
    while True:
        M = np.triu(rng.uniform(size=(n, n)) < p, 1)
        W = M * (rng.uniform(0.1, 1.0, size=(n, n)) if weighted else 1.0)
        A = W + W.T
        if SupportPattern.from_adjacency(A).is_connected():
            return A


def _system(rng, n=12, n_train=3, lam=0.8, c=1):
    A = _connected_graph(rng, n)
    train = rng.choice(n, size=n_train, replace=False)
    Y = rng.uniform(size=(n, c))
    return nm.RegularizedSystem.build(A, train, Y, lam)


def test_two_node_closed_form():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    for lam in (0.1, 1.0, 7.0):
        Y = nm.closed_form_solve(A, np.array([[1.0], [0.0]]), [0], lam)
        assert np.allclose(Y, [[1.0], [1.0]], atol=1e-14)


def test_zero_labels_give_zero_solution():
    rng = np.random.default_rng(0)
    A = _connected_graph(rng, 10)
    assert np.all(nm.closed_form_solve(A, np.zeros((10, 2)), [0, 3], 1.0) == 0)


def test_closed_form_residual():
    rng = np.random.default_rng(1)
    sys = _system(rng)
    Y = nm.closed_form_solve(sys, None, None, None)
    assert np.max(np.abs(sys.B @ Y - sys.rhs)) <= 1e-10


def test_closed_form_rejects_disconnected_and_components_are_flagged():
    A = np.zeros((5, 5))
    A[0, 1] = A[1, 0] = 1.0
    A[2, 3] = A[3, 2] = A[3, 4] = A[4, 3] = 1.0
    Yobs = np.array([[1.0], [0], [0], [0], [0]])
    with pytest.raises(ContractError):
        nm.closed_form_solve(A, Yobs, [0], 1.0)
    Y, flagged = nm.closed_form_by_component(A, Yobs, [0], 1.0)
    assert flagged.tolist() == [False, False, True, True, True]
    assert np.allclose(Y[:2], 1.0) and np.all(Y[2:] == 0)


def test_bad_lambda_and_empty_train():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ContractError):
        nm.RegularizedSystem.build(A, [0], np.ones(2), 0.0)
    with pytest.raises(ContractError):
        nm.RegularizedSystem.build(A, [], np.ones(2), 1.0)


@pytest.mark.parametrize("seed", range(4))
def test_jacobi_matches_lapack(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(30, 30))
    M = M + M.T
    assert np.allclose(nm.jacobi_eigenvalues(M), np.linalg.eigvalsh(M), atol=1e-10)


def test_jacobi_handles_diagonal_and_tiny():
    assert nm.jacobi_eigenvalues(np.diag([3.0, -1.0, 2.0])).tolist() == [-1.0, 2.0, 3.0]
    assert nm.jacobi_eigenvalues(np.array([[5.0]])).tolist() == [5.0]


def test_complete_two_graph_upper_bound():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    spec = nm.spectral_bounds(nm.RegularizedSystem.build(A, [0], np.ones(2), 1.0))
    assert spec.lemma_bound == 3.0
    assert 0 < spec.mu_min <= spec.mu_max <= 3.0


def test_random_graph_positive_spectrum():
    rng = np.random.default_rng(2)
    for _ in range(5):
        spec = nm.spectral_bounds(_system(rng, n=15))
        assert spec.eigenvalues.min() > 1e-12
        assert 0 < spec.nu < 1


def test_spectral_bounds_flags_violation():
    sys = _system(np.random.default_rng(3))
    sys.B = sys.B * 100.0
    with pytest.raises(nm.InternalConsistencyError):
        nm.spectral_bounds(sys)


def test_series_converges_to_closed_form():
    rng = np.random.default_rng(4)
    sys = _system(rng, n=10)
    series = nm.neumann_series(sys)
    assert series.converged
    ref = nm.closed_form_solve(sys, None, None, None)
    assert np.max(np.abs(series.partial_sum() - ref)) <= 1e-8


def test_terms_vanish_beyond_r_hops_and_respect_norm_bound():
    rng = np.random.default_rng(5)
    sys = _system(rng, n=20, n_train=2)
    series = nm.neumann_series(sys, r_max=40)
    d = hop_distances(SupportPattern.from_adjacency(sys.A), sys.train)
    y_inf = np.max(np.abs(sys.Y_obs[sys.train]))
    for r, T in enumerate(series.terms):
        assert np.all(T[d > r] == 0.0)
        bound = series.nu ** r * y_inf / (series.mu_max * math.sqrt(sys.n_train))
        assert np.linalg.norm(T) <= bound * (1 + 1e-12)


def test_series_needs_contraction():
    sys = _system(np.random.default_rng(6))
    spec = nm.spectral_bounds(sys)
    fake = nm.SpectralSummary(spec.mu_min, spec.mu_max, 0.0, 1.0, spec.lemma_bound, spec.eigenvalues)
    with pytest.raises(nm.ConvergenceError):
        nm.neumann_series(sys, spectrum=fake)


def test_dTr_zero_term_and_fd():
    rng = np.random.default_rng(7)
    sys = _system(rng, n=8, n_train=2)
    spec = nm.spectral_bounds(sys)
    series = nm.neumann_series(sys, r_max=6, spectrum=spec)
    s = SupportPattern.from_adjacency(sys.A)
    assert np.all(nm.analytic_dTr(series, 0, 0, *s.edges[0]) == 0)
    h = 1e-6
    for i, j in s.edges[:6]:
        for r in (1, 3, 5):
            def T_r(delta):
                A = sys.A.copy()
                A[i, j] += delta
                A[j, i] += delta
                other = nm.RegularizedSystem.build(A, sys.train, sys.Y_obs, sys.lam, sys.n_edges)
                # mu_max held fixed: it is a constant of the expansion
                return nm.neumann_series(other, r_max=r, tol=0.0, spectrum=spec).terms[r]
            fd = (T_r(h) - T_r(-h)) / (2 * h)
            for u in range(sys.n):
                assert abs(nm.analytic_dTr(series, r, u, i, j)[0] - fd[u, 0]) <= 1e-6


def test_dTr_exact_zero_beyond_reach():
    rng = np.random.default_rng(8)
    sys = _system(rng, n=20, n_train=2)
    series = nm.neumann_series(sys, r_max=10)
    s = SupportPattern.from_adjacency(sys.A)
    dtr = hop_distances(s, sys.train)
    for u in range(sys.n):
        du = hop_distances(s, [u])
        for i, j in s.edges:
            q, k = min(dtr[i], dtr[j]), min(du[i], du[j])
            for r in range(11):
                v = abs(nm.analytic_dTr(series, r, u, i, j)[0])
                if q + k > r:
                    assert v == 0.0
                else:
                    assert v <= nm.lemma2_bound(series, r, q, k) + 1e-12


def test_hypergradient_zero_when_outer_fit_is_exact():
    rng = np.random.default_rng(9)
    sys = _system(rng, n=10)
    Y = nm.closed_form_solve(sys, None, None, None)
    outer = [k for k in range(10) if k not in set(sys.train.tolist())][:3]
    exact = nm.RegularizedSystem.build(sys.A, sys.train, np.where(np.isin(np.arange(10), outer)[:, None], Y, sys.Y_obs),
                                       sys.lam, sys.n_edges)
    edges = SupportPattern.from_adjacency(sys.A).edges
    for method in ("series", "closed"):
        g = nm.analytic_hypergradient(exact, None, outer, edges, method=method).values
        assert np.max(np.abs(g)) <= 1e-15


def _fd_hypergradient(sys, outer, i, j, h=1e-6):
    def F(delta):
        A = sys.A.copy()
        A[i, j] += delta
        A[j, i] += delta
        Y = nm.closed_form_solve(A, sys.Y_obs, sys.train, sys.lam, sys.n_edges)
        return np.mean(np.sum((Y[outer] - sys.Y_obs[outer]) ** 2, axis=1))
    return (F(h) - F(-h)) / (2 * h)


@pytest.mark.parametrize("method", ["series", "closed"])
def test_hypergradient_matches_closed_form_fd(method):
    rng = np.random.default_rng(10)
    sys = _system(rng, n=14, n_train=3, c=2)
    outer = [k for k in range(14) if k not in set(sys.train.tolist())][:4]
    edges = SupportPattern.from_adjacency(sys.A).edges
    g = nm.analytic_hypergradient(sys, None, outer, edges, method=method).values
    fd = np.array([_fd_hypergradient(sys, outer, i, j) for i, j in edges])
    assert np.max(np.abs(g - fd)) <= 1e-5 * np.max(np.abs(fd))


def test_envelope_properties():
    rng = np.random.default_rng(11)
    sys = _system(rng)
    spec = nm.spectral_bounds(sys)
    e = nm.theorem4_envelope(spec, sys, 4, np.array([1.0, 1.0, 50.0]), np.array([2.0, 4.0, 5000.0]))
    assert e[1] == pytest.approx(e[0] * spec.nu ** 2, rel=1e-12)
    assert e[2] < 1e-6 * e[0]
    with pytest.raises(ContractError):
        nm.theorem4_envelope(spec, sys, 4, np.array([np.inf]), np.array([1.0]))
    z = nm.theorem4_envelope(spec, sys, 4, np.array([np.inf]), np.array([1.0]), component_has_outer=[False])
    assert z.tolist() == [0.0]


def test_threaded_sweep_matches_serial(monkeypatch):
    rng = np.random.default_rng(12)
    sys = _system(rng, n=30)
    edges = SupportPattern.from_adjacency(sys.A).edges
    serial = nm.analytic_hypergradient(sys, None, [0, 1], edges).values
    monkeypatch.setenv("SCARCEGRAD_THREADS", "3")
    threaded = nm.analytic_hypergradient(sys, None, [0, 1], edges).values
    assert np.array_equal(serial, threaded)
