"""Experiment configuration, runs, hypergradient profiles and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import bilevel as bl
from .datasets import Dataset, gen_cheaters, gen_synthetic1, load_cora, read_dataset
from .graph import INF, SupportPattern, WeightedGraph, edge_distance, power_support, write_edge_list
from .tensor import ContractError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

PLOT_INF = 15  # bucket used to draw infinite distances
PROFILE_HEADER = ["i", "j", "distance", "abs_hypergradient", "iteration"]
HISTORY_HEADER = ["iteration", "F_out", "out", "val", "test", "refined", "diverged"]


class ConfigError(ContractError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


# defaults of the experimental setup, per dataset and inner model
PRESETS: dict[tuple[str, str], dict[str, Any]] = {
    ("cheaters", "gcn"): dict(hidden=[8], tau_in=200, lr_in=1e-2, lr_out=1e-2, lr_out_g2g=1e-3,
                              init_scale=1e-5, g2g_hidden=[16, 16], g2g_last_scale=1e-5,
                              snapshots=[9]),
    ("cheaters", "laplacian"): dict(lam=1.0, tau_in=200, lr_in=1e-2, lr_out=1e-2, lr_out_g2g=1e-3,
                                    init_scale=1e-5, g2g_hidden=[16, 16], g2g_last_scale=1e-5,
                                    snapshots=[9]),
    ("synthetic1", "laplacian"): dict(lam=1.0, tau_in=500, lr_in=10.0, lr_out=1e-1, lr_out_g2g=1e-1,
                                      init_scale=1.0, g2g_hidden=[16, 16], g2g_last_scale=1.0,
                                      snapshots=[6]),
    ("cora", "gcn"): dict(hidden=[128], tau_in=100, lr_in=1e-2, lr_out=1e-2, lr_out_g2g=1e-4,
                          init_scale=1.0, g2g_hidden=[32, 32], g2g_last_scale=1.0, snapshots=[9]),
    ("cora", "laplacian"): dict(lam=1.0, tau_in=500, lr_in=1e-1, lr_out=1e-2, lr_out_g2g=1e-3,
                                init_scale=1.0, g2g_hidden=[32, 32], g2g_last_scale=1.0,
                                snapshots=[9]),
}
GENERIC = dict(hidden=[8], lam=1.0, tau_in=200, lr_in=1e-2, lr_out=1e-2, lr_out_g2g=1e-3,
               init_scale=1.0, g2g_hidden=[16, 16], g2g_last_scale=1.0, snapshots=[9])


@dataclass
class ExperimentConfig:
    dataset: str = "cheaters"          # cheaters | synthetic1 | cora | path to an exported dataset
    data_seed: int = 0
    n: int | None = None               # synthetic1 size
    mode: str = "spread"               # synthetic1 V_tr placement
    cora_content: str | None = None
    cora_cites: str | None = None
    model: str = "gcn"                 # gcn | laplacian
    hidden: list[int] | None = None
    lam: float | None = None
    param: str = "direct"              # direct | g2g
    power: int = 1                     # support = pattern of A_obs + ... + A_obs^power
    g2g_hidden: list[int] | None = None
    g2g_last_scale: float | None = None
    init_scale: float | None = None
    lo: float = 0.0
    hi: float = 1e6
    gamma: float = 0.0
    tau_in: int | None = None
    tau_out: int = 150
    lr_in: float | None = None
    lr_out: float | None = None
    inner_opt: str = "adam"
    outer_opt: str = "adam"
    seed: int = 0
    snapshots: list[int] | None = None
    out: str = "runs/experiment"

    def dataset_key(self) -> str:
        return self.dataset if self.dataset in ("cheaters", "synthetic1", "cora") else "custom"

    def resolved(self) -> "ExperimentConfig":
        """Copy with every ``None`` replaced by the preset for this dataset and model."""
        preset = PRESETS.get((self.dataset_key(), self.model), GENERIC)
        values = asdict(self)
        for key in ("hidden", "lam", "tau_in", "lr_in", "init_scale", "g2g_hidden", "g2g_last_scale",
                    "snapshots"):
            if values[key] is None:
                values[key] = preset.get(key, GENERIC[key])
        if values["lr_out"] is None:
            values["lr_out"] = preset["lr_out_g2g"] if self.param == "g2g" else preset["lr_out"]
        cfg = ExperimentConfig(**values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        problems = []
        if self.dataset_key() == "custom" and not Path(self.dataset).is_dir():
            problems.append(f"dataset: unknown name or missing directory {self.dataset!r}")
        if self.dataset == "cora" and not (self.cora_content and self.cora_cites):
            problems.append("dataset: cora needs cora_content and cora_cites paths")
        if self.model not in ("gcn", "laplacian"):
            problems.append(f"model: expected gcn or laplacian, got {self.model!r}")
        if self.param not in ("direct", "g2g"):
            problems.append(f"param: expected direct or g2g, got {self.param!r}")
        if self.mode not in ("spread", "concentrated"):
            problems.append(f"mode: expected spread or concentrated, got {self.mode!r}")
        if self.power < 1:
            problems.append(f"power: must be >= 1, got {self.power}")
        if self.param == "g2g" and self.power != 1:
            problems.append("power: the latent model acts on the observed support only")
        if self.gamma < 0:
            problems.append(f"gamma: must be >= 0, got {self.gamma}")
        if self.lo > self.hi:
            problems.append(f"lo/hi: empty box [{self.lo}, {self.hi}]")
        if self.tau_out < 1:
            problems.append(f"tau_out: must be >= 1, got {self.tau_out}")
        if self.tau_in is not None and self.tau_in < 1:
            problems.append(f"tau_in: must be >= 1, got {self.tau_in}")
        for key in ("lr_in", "lr_out", "init_scale", "lam"):
            v = getattr(self, key)
            if v is not None and not v > 0:
                problems.append(f"{key}: must be > 0, got {v}")
        for key in ("inner_opt", "outer_opt"):
            if getattr(self, key) not in ("gd", "adam"):
                problems.append(f"{key}: expected gd or adam, got {getattr(self, key)!r}")
        if self.snapshots is not None and any(s < 0 for s in self.snapshots):
            problems.append("snapshots: iterations must be >= 0")
        if self.snapshots is not None and self.tau_out is not None and any(s > self.tau_out for s in self.snapshots):
            problems.append(f"snapshots: iterations must be <= tau_out ({self.tau_out})")
        if problems:
            raise ConfigError(problems)

    def outer_config(self) -> bl.OuterConfig:
        inner = bl.GcnInner(tuple(self.hidden)) if self.model == "gcn" else bl.LaplacianInner(self.lam)
        return bl.OuterConfig(inner=inner, tau_in=self.tau_in, tau_out=self.tau_out, lr_in=self.lr_in,
                              lr_out=self.lr_out, gamma=self.gamma, seed=self.seed,
                              inner_opt=self.inner_opt, outer_opt=self.outer_opt,
                              snapshots=tuple(self.snapshots))

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# TOML tables are flattened: [dataset] name/seed/..., [inner], [outer], [optim], [run]
_TOML_KEYS = {
    "dataset": {"name": "dataset", "seed": "data_seed", "n": "n", "mode": "mode",
                "content": "cora_content", "cites": "cora_cites"},
    "inner": {"model": "model", "hidden": "hidden", "lambda": "lam", "lam": "lam"},
    "outer": {"param": "param", "power": "power", "g2g_hidden": "g2g_hidden",
              "g2g_last_scale": "g2g_last_scale", "init_scale": "init_scale", "lo": "lo", "hi": "hi",
              "gamma": "gamma"},
    "optim": {"tau_in": "tau_in", "tau_out": "tau_out", "lr_in": "lr_in", "lr_out": "lr_out",
              "inner": "inner_opt", "outer": "outer_opt"},
    "run": {"seed": "seed", "snapshots": "snapshots", "out": "out"},
}


def config_from_mapping(data: dict, overrides: dict | None = None) -> ExperimentConfig:
    values: dict[str, Any] = {}
    problems = []
    for table, body in data.items():
        keys = _TOML_KEYS.get(table)
        if keys is None or not isinstance(body, dict):
            problems.append(f"unknown table [{table}]")
            continue
        for k, v in body.items():
            if k not in keys:
                problems.append(f"unknown key {table}.{k}")
            else:
                values[keys[k]] = v
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    if problems:
        raise ConfigError(problems)
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError([str(exc)]) from None
    return cfg.resolved()


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return config_from_mapping(data, overrides)


# --------------------------------------------------------------------------
# building blocks


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "cheaters":
        return gen_cheaters(cfg.data_seed)
    if cfg.dataset == "synthetic1":
        return gen_synthetic1(cfg.data_seed, n=cfg.n or 1536, mode=cfg.mode)
    if cfg.dataset == "cora":
        return load_cora(cfg.cora_content, cfg.cora_cites, seed=cfg.data_seed)
    return read_dataset(cfg.dataset)


def build_support(ds: Dataset, power: int) -> SupportPattern:
    s = ds.A_obs.support
    return s if power == 1 else power_support(s, power)


def build_param(cfg: ExperimentConfig, ds: Dataset):
    rng = bl.init_seed(cfg.seed)
    support = build_support(ds, cfg.power)
    if cfg.param == "g2g":
        return bl.LatentG2G.init(support, ds.X.shape[1], cfg.g2g_hidden, rng, cfg.g2g_last_scale)
    return bl.DirectEdges.uniform(support, rng, cfg.init_scale, lo=cfg.lo, hi=cfg.hi)


def distance_mode(cfg: ExperimentConfig) -> str:
    return "gcn" if cfg.model == "gcn" else "laplacian"


def profile_rows(support: SupportPattern, distances: np.ndarray, signal: np.ndarray,
                 iteration: int) -> list[list]:
    rows = []
    for (i, j), d, g in zip(support.edges.tolist(), distances.tolist(), np.abs(signal).tolist()):
        rows.append([i, j, "inf" if d == INF else int(d), repr(float(g)), iteration])
    return rows


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def read_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def read_profile(path) -> dict[str, np.ndarray]:
    rows = read_csv(path)
    return {
        "i": np.array([int(r["i"]) for r in rows], dtype=np.int64),
        "j": np.array([int(r["j"]) for r in rows], dtype=np.int64),
        "distance": np.array([float(r["distance"]) for r in rows]),
        "abs_hypergradient": np.array([float(r["abs_hypergradient"]) for r in rows]),
        "iteration": np.array([int(r["iteration"]) for r in rows], dtype=np.int64),
    }


def count_refined(graph_history) -> list[int]:
    """Refined-edge count for each weight snapshot."""
    return [bl.count_refined(w) for w in graph_history]


evaluate = bl.evaluate


# --------------------------------------------------------------------------
# run


@dataclass
class RunArtifacts:
    out: Path
    result: bl.OuterResult
    dataset: Dataset
    config: ExperimentConfig
    support: SupportPattern
    distances: np.ndarray
    profiles: dict[int, np.ndarray] = field(default_factory=dict)


def _save_params(path: Path, history: list[list[np.ndarray]]) -> None:
    arrays = {f"it{t:05d}_{k}": a for t, arrs in enumerate(history) for k, a in enumerate(arrs)}
    np.savez(path, **arrays)


def load_params(path, iteration: int) -> list[np.ndarray]:
    with np.load(path) as data:
        keys = sorted(k for k in data.files if k.startswith(f"it{iteration:05d}_"))
        if not keys:
            raise KeyError(f"no parameters stored for iteration {iteration}")
        return [data[k] for k in sorted(keys, key=lambda k: int(k.split("_")[1]))]


def run(cfg: ExperimentConfig, dataset: Dataset | None = None, progress=None) -> RunArtifacts:
    """Execute one experiment and write every artifact under ``cfg.out``."""
    cfg = cfg.resolved()
    ds = build_dataset(cfg) if dataset is None else dataset
    param = build_param(cfg, ds)
    ocfg = cfg.outer_config()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    result = bl.outer_loop(ocfg, ds, param, progress=progress)
    support = param.support
    dist = edge_distance(support, ds.split.train, ds.split.outer, distance_mode(cfg), metric=ds.A_obs.support)

    _write_csv(out / "history.csv", HISTORY_HEADER,
               [[_fmt(r[k]) if k not in ("iteration", "refined", "diverged") else r[k] for k in HISTORY_HEADER]
                for r in result.history])
    _write_csv(out / "refined.csv", ["iteration", "refined", "n_edges"],
               [[r["iteration"], r["refined"], support.m] for r in result.history])
    profiles = {}
    for it, snap in sorted(result.snapshots.items()):
        _write_csv(out / f"profile_iter{it}.csv", PROFILE_HEADER, profile_rows(support, dist, snap.edge_signal, it))
        profiles[it] = snap.edge_signal
    np.save(out / "weights.npy", np.stack(result.weight_history))
    _save_params(out / "params.npz", result.param_history)
    best_w = result.best.edge_weights(ds.X)
    write_edge_list(WeightedGraph(support, best_w), out / "best_graph.txt")
    write_edge_list(WeightedGraph(support, result.final.edge_weights(ds.X)), out / "final_graph.txt")
    manifest = {
        "config": asdict(cfg),
        "config_sha256": cfg.digest(),
        "dataset": {"name": ds.name, "n": ds.n, "meta": ds.meta, "n_support_edges": support.m},
        "seeds": {"data_seed": cfg.data_seed, "outer_seed": cfg.seed,
                  "inner_seed_rule": "SeedSequence(seed, spawn_key=(0, outer_iteration))",
                  "init_seed_rule": "SeedSequence(seed, spawn_key=(1,))"},
        "best_iteration": result.best_iteration,
        "final_lr_in": result.lr_in,
        "events": result.events,
        "numpy": np.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n",
                                       encoding="utf-8")
    return RunArtifacts(out, result, ds, cfg, support, dist, profiles)


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


# --------------------------------------------------------------------------
# profile / report


def recompute_profile(art_dir, iteration: int) -> Path:
    """Rebuild the hypergradient profile of a finished run at ``iteration``."""
    art = Path(art_dir)
    man_path = art / "manifest.json"
    if not man_path.exists():
        raise FileNotFoundError(f"missing artifact {man_path}")
    manifest = json.loads(man_path.read_text(encoding="utf-8"))
    cfg = ExperimentConfig(**manifest["config"])
    ds = build_dataset(cfg)
    template = build_param(cfg, ds)
    if not 0 <= iteration <= cfg.tau_out:
        raise ContractError(f"iteration {iteration} outside 0..{cfg.tau_out}")
    param = template.replace(load_params(art / "params.npz", iteration))
    ocfg = cfg.outer_config()
    res = bl.hypergradient(ocfg, ds, param, iteration, lr_in=manifest.get("final_lr_in"))
    dist = edge_distance(param.support, ds.split.train, ds.split.outer, distance_mode(cfg), metric=ds.A_obs.support)
    path = art / f"profile_iter{iteration}.csv"
    _write_csv(path, PROFILE_HEADER, profile_rows(param.support, dist, res.edge_signal, iteration))
    return path


def bucket_max(distance: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Largest value per finite distance bucket."""
    finite = np.isfinite(distance)
    keys = np.unique(distance[finite])
    return keys, np.array([values[finite & (distance == k)].max() for k in keys])


def decay_slope(distance: np.ndarray, values: np.ndarray, floor: float = 1e-300) -> float:
    """Least-squares slope of log(bucket max) against distance."""
    keys, top = bucket_max(distance, values)
    keep = top > floor
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(keys[keep], np.log(top[keep]), 1)[0])


def emit_reports(art_dir) -> list[Path]:
    """SVG figures backed by the CSVs of a run directory."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "scarcegrad"
    art = Path(art_dir)
    if not art.is_dir():
        raise FileNotFoundError(f"missing artifact directory {art}")
    history = read_csv(art / "history.csv")
    written = []
    meta = {"Date": None, "Creator": "scarcegrad"}

    it = [int(r["iteration"]) for r in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, label in (("out", "V_out"), ("val", "validation"), ("test", "test")):
        ax.plot(it, [float(r[key]) for r in history], label=label)
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(art / "metrics.svg", metadata=meta)
    plt.close(fig)
    written.append(art / "metrics.svg")

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(it, [int(r["refined"]) for r in history])
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("refined edges")
    fig.tight_layout()
    fig.savefig(art / "refined.svg", metadata=meta)
    plt.close(fig)
    written.append(art / "refined.svg")

    for path in sorted(art.glob("profile_iter*.csv")):
        prof = read_profile(path)
        d = np.where(np.isfinite(prof["distance"]), prof["distance"], PLOT_INF)
        g = prof["abs_hypergradient"]
        floor = 1e-20
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.scatter(d, np.maximum(g, floor), s=4)
        ax.set_yscale("log")
        ax.set_xlabel(f"edge distance (unreachable drawn at {PLOT_INF})")
        ax.set_ylabel(f"|hypergradient| (zeros drawn at {floor:g})")
        fig.tight_layout()
        svg = path.with_suffix(".svg")
        fig.savefig(svg, metadata=meta)
        plt.close(fig)
        written.append(svg)
    return written
