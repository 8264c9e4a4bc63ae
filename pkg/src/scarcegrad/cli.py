"""Command line entry point: ``scarcegrad run|profile|report|gen-dataset|grad-check``."""

from __future__ import annotations

import argparse
import logging
import sys

from .bilevel import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _overrides(args) -> dict:
    keys = ("out", "seed", "tau_in", "tau_out", "lr_in", "lr_out", "gamma", "power", "param", "model")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def cmd_run(args) -> int:
    from .lab import emit_reports, load_config, run

    cfg = load_config(args.config, _overrides(args))

    def show(row):
        if not args.quiet:
            print(f"iter {row['iteration']:4d}  F_out {row['F_out']:.6g}  out {row['out']:.4f}  "
                  f"val {row['val']:.4f}  test {row['test']:.4f}  refined {row['refined']}", flush=True)

    art = run(cfg, progress=show)
    if not args.no_report:
        emit_reports(art.out)
    print(f"artifacts in {art.out} (best iteration {art.result.best_iteration})")
    return EXIT_OK


def cmd_profile(args) -> int:
    from .lab import recompute_profile

    print(recompute_profile(args.artifact_dir, args.iteration))
    return EXIT_OK


def cmd_report(args) -> int:
    from .lab import emit_reports

    for path in emit_reports(args.artifact_dir):
        print(path)
    return EXIT_OK


def cmd_gen_dataset(args) -> int:
    from .datasets import export_dataset, gen_cheaters, gen_synthetic1, load_cora

    if args.name == "cheaters":
        ds = gen_cheaters(args.seed)
    elif args.name == "synthetic1":
        ds = gen_synthetic1(args.seed, n=args.n or 1536, mode=args.mode)
    else:
        if not (args.content and args.cites):
            print("cora needs --content and --cites", file=sys.stderr)
            return EXIT_CONFIG
        ds = load_cora(args.content, args.cites, seed=args.seed)
    print(export_dataset(ds, args.out))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .checks import run_grad_checks

    worst = 0.0
    for name, err in run_grad_checks(args.instances, args.seed):
        worst = max(worst, err)
        print(f"{name:24s} max rel err {err:.3e}  {'ok' if err <= args.tol else 'FAIL'}")
    print(f"overall max rel err {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if worst <= args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scarcegrad", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute an experiment from a TOML config")
    r.add_argument("config")
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--tau-in", dest="tau_in", type=int)
    r.add_argument("--tau-out", dest="tau_out", type=int)
    r.add_argument("--lr-in", dest="lr_in", type=float)
    r.add_argument("--lr-out", dest="lr_out", type=float)
    r.add_argument("--gamma", type=float)
    r.add_argument("--power", type=int)
    r.add_argument("--param", choices=["direct", "g2g"])
    r.add_argument("--model", choices=["gcn", "laplacian"])
    r.add_argument("--no-report", action="store_true")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    pr = sub.add_parser("profile", help="recompute the hypergradient profile of a run")
    pr.add_argument("artifact_dir")
    pr.add_argument("--iteration", type=int, required=True)
    pr.set_defaults(func=cmd_profile)

    rep = sub.add_parser("report", help="render SVG figures from run CSVs")
    rep.add_argument("artifact_dir")
    rep.set_defaults(func=cmd_report)

    g = sub.add_parser("gen-dataset", help="generate and export a dataset")
    g.add_argument("name", choices=["cheaters", "synthetic1", "cora"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--mode", choices=["spread", "concentrated"], default="spread")
    g.add_argument("--content")
    g.add_argument("--cites")
    g.set_defaults(func=cmd_gen_dataset)

    c = sub.add_parser("grad-check", help="finite-difference check of every primitive and inner model")
    c.add_argument("--instances", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-5)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    from .tensor import ContractError  # ConfigError is a ContractError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, FileNotFoundError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
