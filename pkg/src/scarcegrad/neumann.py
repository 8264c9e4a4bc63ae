"""Closed-form Laplacian solution, its spectrum, Neumann terms and analytic hypergradients.

Everything here is plain numpy/scipy and never touches a tape, so it can be
used to cross-check the unrolled hypergradients.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .graph import SupportPattern, hop_distances
from .tensor import ContractError


class InternalConsistencyError(AssertionError):
    """A computed quantity contradicts a bound that must hold."""


class ConvergenceError(RuntimeError):
    pass


def _as_adjacency(A) -> np.ndarray:
    A = A.adjacency() if hasattr(A, "adjacency") else np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"adjacency must be square, got {A.shape}")
    if not np.array_equal(A, A.T):
        raise ContractError("adjacency must be symmetric")
    return A


@dataclass
class RegularizedSystem:
    """``B = S_in / |V_tr| + lam * L / |E|`` together with its right-hand side."""

    A: np.ndarray = field(repr=False)
    train: np.ndarray
    Y_obs: np.ndarray = field(repr=False)
    lam: float
    n_edges: int
    y_inf: float
    B: np.ndarray = field(repr=False)
    rhs: np.ndarray = field(repr=False)  # S_in Y_obs / |V_tr|

    @classmethod
    def build(cls, A, train, Y_obs, lam: float, n_edges: int | None = None,
              y_inf: float | None = None) -> "RegularizedSystem":
        A = _as_adjacency(A)
        n = A.shape[0]
        train = np.asarray(train, dtype=np.int64).reshape(-1)
        if train.size == 0:
            raise ContractError("V_tr must be nonempty")
        if not lam > 0:
            raise ContractError(f"lambda must be positive, got {lam}")
        Y = np.asarray(Y_obs, dtype=np.float64)
        Y = Y[:, None] if Y.ndim == 1 else Y
        if Y.shape[0] != n:
            raise ContractError(f"labels have {Y.shape[0]} rows for {n} nodes")
        if n_edges is None:
            n_edges = int(np.count_nonzero(np.triu(A, k=1)))
        if n_edges <= 0:
            raise ContractError("|E| must be positive")
        s = np.zeros(n)
        s[train] = 1.0 / len(train)
        L = np.diag(A.sum(axis=1)) - A
        B = np.diag(s) + (lam / n_edges) * L
        rhs = s[:, None] * Y
        if y_inf is None:
            y_inf = float(np.max(np.abs(Y[train])))
        return cls(A, train, Y, float(lam), int(n_edges), float(y_inf), B, rhs)

    @classmethod
    def from_dataset(cls, dataset, A=None, lam: float = 1.0, n_edges: int | None = None):
        A = dataset.A_obs if A is None else A
        if n_edges is None and hasattr(A, "n_edges"):
            n_edges = A.n_edges
        labelled = dataset.split.labelled()
        y_inf = float(np.max(np.abs(dataset.targets.Y[labelled])))
        return cls.build(A, dataset.split.train, dataset.targets.Y, lam, n_edges, y_inf)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_train(self) -> int:
        return len(self.train)


def _connected(A: np.ndarray) -> bool:
    return SupportPattern.from_adjacency(A).is_connected()


def closed_form_solve(A, targets_Y, train, lam: float, n_edges: int | None = None) -> np.ndarray:
    """``Y = B^{-1} S_in Y_obs / |V_tr|`` by a Cholesky solve; the graph must be connected."""
    sys = A if isinstance(A, RegularizedSystem) else RegularizedSystem.build(A, train, targets_Y, lam, n_edges)
    if not _connected(sys.A):
        raise ContractError("closed_form_solve: graph is disconnected, B may be singular")
    return cho_solve(cho_factor(sys.B), sys.rhs)


def closed_form_by_component(A, targets_Y, train, lam: float, n_edges: int | None = None):
    """Solve each connected component on its own.

    Components without training nodes get ``Y = 0``; the returned boolean
    mask flags their nodes.
    """
    sys = RegularizedSystem.build(A, train, targets_Y, lam, n_edges)
    comp = SupportPattern.from_adjacency(sys.A).components()
    Y = np.zeros_like(sys.rhs)
    flagged = np.zeros(sys.n, dtype=bool)
    in_train = np.zeros(sys.n, dtype=bool)
    in_train[sys.train] = True
    for c in np.unique(comp):
        idx = np.flatnonzero(comp == c)
        if not in_train[idx].any():
            flagged[idx] = True
            continue
        Bc = sys.B[np.ix_(idx, idx)]
        Y[idx] = cho_solve(cho_factor(Bc), sys.rhs[idx])
    return Y, flagged


# --------------------------------------------------------------------------
# symmetric eigenvalues by cyclic Jacobi rotations


def _round_robin(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Pair schedule in which every round rotates disjoint index pairs."""
    N = n + (n % 2)
    players = np.arange(N)
    P, Q = [], []
    for _ in range(N - 1):
        a = players[: N // 2]
        b = players[::-1][: N // 2]
        keep = (a < n) & (b < n)
        P.append(np.minimum(a, b)[keep])
        Q.append(np.maximum(a, b)[keep])
        players = np.concatenate([players[:1], players[-1:], players[1:-1]])
    width = max((len(p) for p in P), default=0)
    PP = -np.ones((max(N - 1, 0), width), dtype=np.int64)
    QQ = -np.ones_like(PP)
    for r, (p, q) in enumerate(zip(P, Q)):
        PP[r, : len(p)] = p
        QQ[r, : len(q)] = q
    return PP, QQ


@numba.njit(cache=True)
def _jacobi_sweep(A, PP, QQ):
    n = A.shape[0]
    width = PP.shape[1]
    c = np.empty(width)
    s = np.empty(width)
    for r in range(PP.shape[0]):
        for k in range(width):
            p = PP[r, k]
            q = QQ[r, k]
            c[k] = 1.0
            s[k] = 0.0
            if p < 0:
                continue
            apq = A[p, q]
            if apq == 0.0:
                continue
            theta = (A[q, q] - A[p, p]) / (2.0 * apq)
            if abs(theta) > 1e150:
                t = 0.5 / theta
            else:
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
            c[k] = 1.0 / np.sqrt(t * t + 1.0)
            s[k] = t * c[k]
        for k in range(width):
            p = PP[r, k]
            q = QQ[r, k]
            if p < 0 or s[k] == 0.0:
                continue
            for j in range(n):
                x = A[p, j]
                y = A[q, j]
                A[p, j] = c[k] * x - s[k] * y
                A[q, j] = s[k] * x + c[k] * y
        for i in range(n):
            for k in range(width):
                p = PP[r, k]
                q = QQ[r, k]
                if p < 0 or s[k] == 0.0:
                    continue
                x = A[i, p]
                y = A[i, q]
                A[i, p] = c[k] * x - s[k] * y
                A[i, q] = s[k] * x + c[k] * y
        for k in range(width):
            p = PP[r, k]
            q = QQ[r, k]
            if p >= 0 and s[k] != 0.0:
                A[p, q] = 0.0
                A[q, p] = 0.0


def _off_norm(A: np.ndarray) -> float:
    # zero the diagonal instead of subtracting squares, which cancels badly
    d = np.diag(A).copy()
    np.fill_diagonal(A, 0.0)
    out = float(np.linalg.norm(A))
    np.fill_diagonal(A, d)
    return out


def jacobi_eigenvalues(M, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix.

    Sweeps continue until the off-diagonal Frobenius norm is at most
    ``tol * ||M||_F``.
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"jacobi_eigenvalues needs a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ContractError("jacobi_eigenvalues needs a symmetric matrix")
    A = 0.5 * (A + A.T)
    if A.shape[0] <= 1:
        return np.diag(A).copy()
    PP, QQ = _round_robin(A.shape[0])
    scale = np.linalg.norm(A)
    for _ in range(max_sweeps):
        if _off_norm(A) <= tol * scale:
            return np.sort(np.diag(A))
        _jacobi_sweep(A, PP, QQ)
    raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")


@dataclass(frozen=True)
class SpectralSummary:
    mu_min: float
    mu_max: float
    mu: float
    nu: float
    lemma_bound: float        # 1/|V_tr| + 2 lam
    eigenvalues: np.ndarray = field(repr=False)


def spectral_bounds(sys: RegularizedSystem, tol: float = 1e-12, slack: float = 1e-9) -> SpectralSummary:
    """Extreme eigenvalues of ``B`` with the positivity and upper-bound checks.

    The upper bound is checked in its weighted form
    ``1/|V_tr| + 2 lam d_max/|E|`` which reduces to ``1/|V_tr| + 2 lam`` for
    weights in ``[0, 1]``.
    """
    ev = jacobi_eigenvalues(sys.B, tol)
    mu_min, mu_max = float(ev[0]), float(ev[-1])
    d_max = float(sys.A.sum(axis=1).max())
    weighted = 1.0 / sys.n_train + 2.0 * sys.lam * d_max / sys.n_edges
    if not mu_min > 0:
        raise InternalConsistencyError(f"B is not positive definite: mu_min = {mu_min:.3e}")
    if mu_max > weighted + slack:
        raise InternalConsistencyError(f"mu_max = {mu_max!r} exceeds its bound {weighted!r}")
    mu = mu_min / mu_max
    return SpectralSummary(mu_min, mu_max, mu, 1.0 - mu, 1.0 / sys.n_train + 2.0 * sys.lam, ev)


# --------------------------------------------------------------------------
# Neumann terms


@dataclass
class NeumannSeries:
    terms: list[np.ndarray] = field(repr=False)
    mu_max: float
    nu: float
    residual: float           # bound on the norm of the neglected tail
    converged: bool
    sys: RegularizedSystem = field(repr=False)
    spectrum: SpectralSummary = field(repr=False)

    @property
    def R(self) -> int:
        return len(self.terms) - 1

    def partial_sum(self, upto: int | None = None) -> np.ndarray:
        upto = self.R if upto is None else upto
        return np.sum(self.terms[: upto + 1], axis=0)

    def step_matrix(self) -> np.ndarray:
        """``I - B / mu_max``."""
        return np.eye(self.sys.n) - self.sys.B / self.mu_max


def default_r_max(sys: RegularizedSystem, spectrum: SpectralSummary, tol: float) -> int:
    """``4 diam + 50``, raised when the geometric tail needs more terms to reach ``tol``."""
    from .graph import diameter

    base = int(4 * diameter(SupportPattern.from_adjacency(sys.A)) + 50)
    t0 = np.linalg.norm(sys.rhs) / spectrum.mu_max
    if t0 == 0:
        return base
    need = math.log(tol * spectrum.mu / t0) / math.log(spectrum.nu)
    return max(base, int(math.ceil(need)) + 1)


def neumann_series(sys: RegularizedSystem, r_max: int | None = None, tol: float = 1e-12,
                   spectrum: SpectralSummary | None = None) -> NeumannSeries:
    """Terms ``T_r = (I - B/mu_max)^r S_in Y_obs / (|V_tr| mu_max)`` until ``||T_r|| <= tol``."""
    spectrum = spectral_bounds(sys) if spectrum is None else spectrum
    if spectrum.nu >= 1.0 - 1e-12:
        raise ConvergenceError(f"nu = {spectrum.nu!r} leaves no room for a convergent series")
    r_max = default_r_max(sys, spectrum, tol) if r_max is None else int(r_max)
    M = np.eye(sys.n) - sys.B / spectrum.mu_max
    T = sys.rhs / spectrum.mu_max
    terms = [T]
    while np.linalg.norm(T) > tol and len(terms) <= r_max:
        T = M @ T
        terms.append(T)
    last = float(np.linalg.norm(terms[-1]))
    residual = last * spectrum.nu / spectrum.mu
    return NeumannSeries(terms, spectrum.mu_max, spectrum.nu, residual, last <= tol, sys, spectrum)


def analytic_dTr(series: NeumannSeries, r: int, u: int, i: int, j: int) -> np.ndarray:
    """``d(T_r)_u / dA_ij`` for the undirected edge weight, one entry per label column."""
    if r > series.R:
        raise ContractError(f"r = {r} exceeds the computed truncation {series.R}")
    sys = series.sys
    c = series.terms[0].shape[1]
    if r == 0:
        return np.zeros(c)
    M = series.step_matrix()
    row = np.zeros(sys.n)
    row[u] = 1.0
    # rows[a] = (M^a)_{u,:}, needed for a = 0..r-1
    rows = [row]
    for _ in range(r - 1):
        rows.append(M @ rows[-1])
    total = np.zeros(c)
    for h in range(1, r + 1):
        Pa = rows[r - h]
        T = series.terms[h - 1]
        total += Pa[i] * T[i] + Pa[j] * T[j] - Pa[j] * T[i] - Pa[i] * T[j]
    return -(sys.lam / (sys.n_edges * series.mu_max)) * total


def lemma2_bound(series: NeumannSeries, r: int, q: float, k: float) -> float:
    """Upper bound on ``|d(T_r)_u / dA_ij|``; zero when ``q + k > r``."""
    if q + k > r:
        return 0.0
    sys = series.sys
    return (4.0 * sys.lam * sys.y_inf / (sys.n_edges * series.mu_max ** 2 * math.sqrt(sys.n_train))
            * (r - q - k) * series.nu ** (r - 1))


@dataclass
class AnalyticHypergradient:
    values: np.ndarray        # one per requested edge
    residual: float
    precision_warning: bool


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SCARCEGRAD_THREADS", "1")))
    except ValueError:
        return 1


def _chunked(fn, m: int) -> np.ndarray:
    nthreads = _threads()
    if nthreads == 1 or m < 2 * nthreads:
        return fn(np.arange(m))
    chunks = np.array_split(np.arange(m), nthreads)
    with ThreadPoolExecutor(nthreads) as pool:
        return np.concatenate(list(pool.map(fn, chunks)))


def outer_residual(Y: np.ndarray, Y_obs: np.ndarray, outer, normalize: bool = True) -> np.ndarray:
    """``dF_out/dY`` for the squared loss on ``outer``; mean over nodes when ``normalize``."""
    W = np.zeros_like(Y)
    outer = np.asarray(outer, dtype=np.int64)
    W[outer] = 2.0 * (Y[outer] - Y_obs[outer])
    return W / len(outer) if normalize else W


def analytic_hypergradient(sys: RegularizedSystem, series: NeumannSeries | None, outer, edges,
                           method: str = "series", normalize: bool = True,
                           tol: float = 1e-10) -> AnalyticHypergradient:
    """``dF_out/dA_ij`` for every edge in ``edges`` from the Neumann expansion.

    ``method="series"`` sums the truncated double series over ``(T_b, M^a W)``
    pairs with ``a + b <= R - 1``; ``method="closed"`` uses its limit
    ``-(lam/|E|) (Z_i - Z_j)(Y_i - Y_j)`` with ``Z = B^{-1} W``.
    ``W`` is the outer-loss residual, averaged over ``outer`` when ``normalize``.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    i, j = edges[:, 0], edges[:, 1]
    factor = cho_factor(sys.B)
    Y = cho_solve(factor, sys.rhs)
    W = outer_residual(Y, sys.Y_obs, outer, normalize)
    scale = sys.lam / sys.n_edges
    if method == "closed":
        Z = cho_solve(factor, W)
        fn = lambda idx: -scale * np.sum((Z[i[idx]] - Z[j[idx]]) * (Y[i[idx]] - Y[j[idx]]), axis=1)
        return AnalyticHypergradient(_chunked(fn, len(edges)), 0.0, False)
    if method != "series":
        raise ContractError(f"unknown method {method!r}")
    if series is None:
        series = neumann_series(sys)
    R = series.R
    M = series.step_matrix()
    Z = [W]
    for _ in range(R - 1):
        Z.append(M @ Z[-1])
    P = np.cumsum(np.stack(Z), axis=0)          # P[s] = sum_{a<=s} M^a W
    T = np.stack(series.terms[:R])              # T[b], b = 0..R-1
    DP = P[:, i, :] - P[:, j, :] if R else np.zeros((0, len(edges), W.shape[1]))
    DT = T[:, i, :] - T[:, j, :] if R else DP

    def fn(idx):
        # sum_b D(T_b) . D(P_{R-1-b})
        acc = np.zeros(len(idx))
        for b in range(R):
            acc += np.sum(DT[b][idx] * DP[R - 1 - b][idx], axis=1)
        return -(scale / series.mu_max) * acc

    values = _chunked(fn, len(edges))
    # neglected pairs have a + b >= R; |D(.)| <= 2 ||.|| and both factors contract by nu
    nu = series.nu
    tail = nu ** R * ((R + 1) / (1 - nu) + nu / (1 - nu) ** 2)
    residual = float(4.0 * scale / series.mu_max * np.linalg.norm(W) * np.linalg.norm(T[0] if R else 0.0) * tail)
    return AnalyticHypergradient(values, residual, residual > tol)


def edge_q_k(support: SupportPattern, train, outer) -> tuple[np.ndarray, np.ndarray]:
    """Per edge: hops to ``V_tr`` and to ``V_out``, each minimized over the endpoints."""
    dt = hop_distances(support, train)
    do = hop_distances(support, outer)
    i, j = support.rows, support.cols
    return np.minimum(dt[i], dt[j]), np.minimum(do[i], do[j])


def theorem4_envelope(spectrum: SpectralSummary, sys: RegularizedSystem, n_outer: int, q, k,
                      c_abs: float = 16.0, component_has_outer=None) -> np.ndarray:
    """Exponentially damped bound on ``|dF_out/dA_ij|`` in ``q + k``.

    ``C_abs * lam (sqrt|V_out| + mu_min sqrt|V_tr| |V_out|) / (mu_min^3 |V_tr| |E|)
    * y_inf^2 * (1 - mu)^(q + k)``. Infinite distances give 0, which is only
    a valid claim where the edge's component holds no ``V_out`` node
    (``component_has_outer`` false); elsewhere they raise.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    mu_min = spectrum.mu_min
    pref = (sys.lam * (math.sqrt(n_outer) + mu_min * math.sqrt(sys.n_train) * n_outer)
            / (mu_min ** 3 * sys.n_train * sys.n_edges) * sys.y_inf ** 2)
    d = q + k
    finite = np.isfinite(d)
    if not np.all(finite):
        if component_has_outer is None or np.any(np.asarray(component_has_outer)[~finite]):
            raise ContractError("infinite distance on an edge whose component contains V_out")
    out = np.zeros(np.broadcast(q, k).shape)
    out[finite] = c_abs * pref * spectrum.nu ** d[finite]
    return out
