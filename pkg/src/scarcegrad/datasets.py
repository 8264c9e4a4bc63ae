"""Dataset records and generators: synthetic regression, the cheaters classroom, Cora."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import NodeSplit, SupportPattern, WeightedGraph, read_edge_list, write_edge_list
from .models import LabeledTargets
from .neumann import closed_form_solve
from .tensor import ContractError

log = logging.getLogger(__name__)


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    A_obs: WeightedGraph
    labels: np.ndarray              # full ground truth, n x c (one-hot for classification)
    split: NodeSplit
    task: str                       # "regression" | "classification"
    A_star: WeightedGraph | None = None
    meta: dict = field(default_factory=dict)
    targets: LabeledTargets = field(init=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if not np.all(np.isfinite(self.X)):
            raise ContractError("features must be finite")
        if self.task not in ("regression", "classification"):
            raise ContractError(f"unknown task {self.task!r}")
        labels = np.asarray(self.labels, dtype=np.float64)
        self.labels = labels[:, None] if labels.ndim == 1 else labels
        n = self.X.shape[0]
        if self.A_obs.n != n or self.labels.shape[0] != n:
            raise ContractError("features, graph and labels disagree on n")
        mask = np.zeros(n, dtype=bool)
        mask[self.split.labelled()] = True
        self.targets = LabeledTargets(self.labels, mask)

    @property
    def n(self) -> int:
        return self.X.shape[0]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _split_rest(rng: np.random.Generator, n: int, taken) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle the unused nodes and cut them in two halves (val, test)."""
    rest = np.setdiff1d(np.arange(n), np.concatenate([np.asarray(t) for t in taken]))
    rest = rng.permutation(rest)
    half = len(rest) // 2
    return np.sort(rest[:half]), np.sort(rest[half:])


# --------------------------------------------------------------------------
# synthetic dataset 1: geometric graph, Gaussian-bump labels propagated on A*

SYN1_N = 1536
SYN1_SIGMA = 0.06
SYN1_BANDWIDTH = 0.2


def synthetic1_sigma(n: int) -> float:
    """Connection radius; kept at 0.06 for n=1536 and scaled by 1/sqrt(n) otherwise
    so that the expected degree stays the same."""
    return SYN1_SIGMA * math.sqrt(SYN1_N / n)


def gen_synthetic1(seed: int, n: int = SYN1_N, mode: str = "spread", sigma: float | None = None,
                   n_train: int = 100, n_outer: int = 25, lam: float = 1.0,
                   max_attempts: int = 20) -> Dataset:
    if mode not in ("spread", "concentrated"):
        raise ContractError(f"unknown V_tr mode {mode!r}")
    if n_train + n_outer >= n:
        raise ContractError(f"synthetic1: n = {n} leaves no validation/test nodes")
    sigma = synthetic1_sigma(n) if sigma is None else sigma
    for attempt in range(max_attempts):
        rng = _rng(seed, attempt)
        X = rng.uniform(0.0, 1.0, size=(n, 2))
        diff = X[:, None, :] - X[None, :, :]
        close = np.sqrt(np.sum(diff ** 2, axis=-1)) < sigma
        np.fill_diagonal(close, False)
        star = SupportPattern.from_adjacency(close)
        if star.is_connected():
            break
        log.info("synthetic1: A* disconnected on attempt %d, regenerating", attempt)
    else:
        raise ContractError(f"synthetic1: no connected A* after {max_attempts} attempts")

    A_star = WeightedGraph(star, np.ones(star.m))
    A_obs = WeightedGraph(star, rng.uniform(0.0, 1.0, size=star.m))
    if mode == "spread":
        train = rng.choice(n, size=n_train, replace=False)
    else:
        train = np.argsort(np.sum((X - 0.5) ** 2, axis=1), kind="stable")[:n_train]
    train = np.sort(train)
    outer = np.sort(rng.choice(np.setdiff1d(np.arange(n), train), size=n_outer, replace=False))
    val, test = _split_rest(rng, n, [train, outer])

    centers = rng.uniform(0.0, 1.0, size=(3, 2))
    bumps = np.exp(-np.sum((X[:, None, :] - centers[None]) ** 2, axis=-1) / (2 * SYN1_BANDWIDTH ** 2))
    raw = bumps.sum(axis=1)
    zeta = 1.0 / raw.max()
    seed_labels = np.zeros((n, 1))
    seed_labels[train, 0] = zeta * raw[train]
    Y = closed_form_solve(A_star.adjacency(), seed_labels, train, lam)
    Y[train] = seed_labels[train]
    meta = {"seed": seed, "attempt": attempt, "n": n, "p": 2, "sigma": sigma, "mode": mode,
            "zeta": zeta, "lambda": lam, "centers": centers.tolist(), "bandwidth": SYN1_BANDWIDTH}
    return Dataset("synthetic1", X, A_obs, Y, NodeSplit(train, outer, val, test), "regression",
                   A_star=A_star, meta=meta)


# --------------------------------------------------------------------------
# cheaters: students on a line copying from their neighbours


def gen_cheaters(seed: int, n: int = 256, p: int = 10, sigma: float = 0.027,
                 threshold: float = 60.0) -> Dataset:
    rng = _rng(seed, 0)
    X = rng.uniform(0.0, 1.0, size=(n, p))
    X = X[np.argsort(X[:, 0], kind="stable")]
    pos = X[:, 0]
    star = np.exp(-((pos[:, None] - pos[None, :]) ** 2) / (2 * sigma ** 2))
    # upper-triangle draws mirrored, no self-loops
    draws = rng.uniform(size=(n, n)) < star
    upper = np.triu(draws, k=1)
    A_obs = WeightedGraph.from_adjacency((upper | upper.T).astype(np.float64))
    grade = star @ X[:, 1:10] @ np.ones(min(9, p - 1))
    passed = (grade > threshold).astype(np.int64)
    labels = np.eye(2)[passed]

    train = np.concatenate([np.arange(0, n // 8 + 1), np.arange(7 * n // 8, n)])
    outer = np.arange(3 * n // 8, 5 * n // 8 + 1)
    val, test = _split_rest(rng, n, [train, outer])
    off = star.copy()
    np.fill_diagonal(off, 0.0)
    meta = {"seed": seed, "n": n, "p": p, "sigma": sigma, "threshold": threshold,
            "pass_rate": float(passed.mean())}
    return Dataset("cheaters", X, A_obs, labels, NodeSplit(train, outer, val, test),
                   "classification", A_star=WeightedGraph.from_adjacency(off),
                   meta=meta)


def grades(X: np.ndarray, A_star: np.ndarray) -> np.ndarray:
    return A_star @ X[:, 1:10] @ np.ones(min(9, X.shape[1] - 1))


# --------------------------------------------------------------------------
# Cora


def load_cora(content_path, cites_path, seed: int = 0, n_train: int = 140,
              n_outer: int = 140) -> Dataset:
    """Read the raw ``cora.content`` / ``cora.cites`` pair.

    Classes are indexed in sorted name order. Citations naming unknown papers
    are skipped and counted in ``meta["skipped_cites"]``.
    """
    ids, feats, names = [], [], []
    width = None
    for lineno, line in enumerate(Path(content_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) < 3:
            raise ParseError(f"{content_path}:{lineno}: expected id, flags and label")
        if width is None:
            width = len(parts) - 2
        if len(parts) - 2 != width:
            raise ParseError(f"{content_path}:{lineno}: {len(parts) - 2} features, expected {width}")
        try:
            row = [int(v) for v in parts[1:-1]]
        except ValueError:
            raise ParseError(f"{content_path}:{lineno}: non-integer feature flag") from None
        if any(v not in (0, 1) for v in row):
            raise ParseError(f"{content_path}:{lineno}: feature flags must be 0 or 1")
        ids.append(parts[0])
        feats.append(row)
        names.append(parts[-1])
    if not ids:
        raise ParseError(f"{content_path}: no papers")
    index = {pid: k for k, pid in enumerate(ids)}
    if len(index) != len(ids):
        raise ParseError(f"{content_path}: duplicate paper ids")
    n = len(ids)
    classes = sorted(set(names))
    y = np.array([classes.index(c) for c in names])
    labels = np.eye(len(classes))[y]

    pairs, skipped = [], 0
    for lineno, line in enumerate(Path(cites_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"{cites_path}:{lineno}: expected '<cited> <citing>'")
        a, b = index.get(parts[0]), index.get(parts[1])
        if a is None or b is None:
            skipped += 1
            continue
        pairs.append((a, b))
    if skipped:
        log.warning("load_cora: skipped %d citations with unknown ids", skipped)
    support = SupportPattern.from_pairs(n, pairs)
    A_obs = WeightedGraph(support, np.ones(support.m))

    rng = _rng(seed, 0)
    order = rng.permutation(n)
    if n_train + n_outer >= n:
        raise ContractError("split sizes leave no validation/test nodes")
    train = np.sort(order[:n_train])
    outer = np.sort(order[n_train:n_train + n_outer])
    val, test = _split_rest(rng, n, [train, outer])
    meta = {"seed": seed, "n": n, "p": width, "classes": classes, "skipped_cites": skipped,
            "n_train": n_train, "n_outer": n_outer}
    return Dataset("cora", np.array(feats, dtype=np.float64), A_obs, labels,
                   NodeSplit(train, outer, val, test), "classification", meta=meta)


# --------------------------------------------------------------------------
# export / import


SPLIT_FILES = {"train": "train.txt", "outer": "outer.txt", "val": "val.txt", "test": "test.txt"}


def export_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "X.csv", ds.X, delimiter=",", fmt="%.17g")
    write_edge_list(ds.A_obs, out / "edges.txt")
    if ds.A_star is not None:
        write_edge_list(ds.A_star, out / "edges_star.txt")
    mask = ds.targets.mask
    lines = ["node,label,mask"]
    for k in range(ds.n):
        lab = int(np.argmax(ds.labels[k])) if ds.task == "classification" else repr(float(ds.labels[k, 0]))
        lines.append(f"{k},{lab},{int(mask[k])}")
    (out / "labels.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, fname in SPLIT_FILES.items():
        nodes = ds.split.subset(name)
        (out / fname).write_text("".join(f"{v}\n" for v in nodes.tolist()), encoding="utf-8")
    info = {"name": ds.name, "task": ds.task, "n_classes": int(ds.labels.shape[1]), "meta": ds.meta}
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_dataset(path) -> Dataset:
    d = Path(path)
    info = json.loads((d / "dataset.json").read_text(encoding="utf-8"))
    X = np.loadtxt(d / "X.csv", delimiter=",", ndmin=2)
    n = X.shape[0]
    A_obs = read_edge_list(d / "edges.txt", n=n)
    A_star = read_edge_list(d / "edges_star.txt", n=n) if (d / "edges_star.txt").exists() else None
    rows = (d / "labels.csv").read_text(encoding="utf-8").splitlines()[1:]
    raw = [r.split(",")[1] for r in rows]
    if info["task"] == "classification":
        labels = np.eye(info["n_classes"])[[int(v) for v in raw]]
    else:
        labels = np.array([float(v) for v in raw])[:, None]
    parts = {}
    for name, fname in SPLIT_FILES.items():
        text = (d / fname).read_text(encoding="utf-8").split()
        parts[name] = np.array([int(v) for v in text], dtype=np.int64)
    return Dataset(info["name"], X, A_obs, labels, NodeSplit(**parts), info["task"],
                   A_star=A_star, meta=info["meta"])
