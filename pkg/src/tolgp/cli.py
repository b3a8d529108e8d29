"""Command line entry point: ``tolgp run|bench|kl|demo-likelihood``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from . import _backend
from .bench import demo_likelihoods, grid_entropy, run_benchmark, run_strategy, true_posterior_kl
from .doe import load_design
from .driver import ConfigError, Strategy, Snapshot, load_config, run_tag


def parse_seeds(text: str) -> list[int]:
    """``"5"`` means seeds 0..4; ``"3,7,11"`` is an explicit list."""
    text = text.strip()
    if "," in text:
        return [int(t) for t in text.split(",") if t.strip()]
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("seed count must be positive")
    return list(range(n))


def _strategies(values):
    if not values:
        return None
    out = []
    for v in values:
        out.extend(s.strip() for s in v.split(",") if s.strip())
    return [Strategy(s).value for s in out]


def _out_dir(args, config) -> Path:
    return Path(args.out or config.out_dir)


def cmd_run(args) -> int:
    config = load_config(args.config)
    strategies = _strategies(args.strategy) or [config.strategy.value]
    seeds = args.seeds or [config.seed]
    out = _out_dir(args, config)
    for st in strategies:
        for sd in seeds:
            res = run_strategy(config, st, sd, out)
            print(f"{run_tag(st, sd)}: iterations={res.iterations} points={res.history[-1].design.size} "
                  f"work={res.ledger.total:.6g} samples={len(res.chain)}")
    print(f"outputs in {out}")
    return 0


def cmd_bench(args) -> int:
    config = load_config(args.config)
    seeds = args.seeds or [config.seed]
    out = _out_dir(args, config)
    _, summary = run_benchmark(config, _strategies(args.strategy), seeds, out, args.kl_method, args.jobs)
    for st, rec in summary.items():
        med = rec["median_final_kl"]
        med = "n/a" if med is None else f"{med:.4g}"
        print(f"{st:24s} median final KL {med}  failures {len(rec['failures'])}")
    print(f"outputs in {out}")
    return 1 if any(rec["failures"] for rec in summary.values()) else 0


def cmd_kl(args) -> int:
    config = load_config(args.config)
    fm = config.forward_model
    snap = Snapshot.from_dict(load_design(args.snapshot), fm.d, fm.m)
    kl = true_posterior_kl(snap, config, args.kl_method)
    print(repr(kl) if math.isfinite(kl) else "inf")
    return 0


def cmd_demo(args) -> int:
    table = demo_likelihoods(args.nodes, zero_variance=args.zero_variance)
    cell = table[1, 0] - table[0, 0]
    out = Path(args.out or "out") / "demo_likelihood.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "plugin", "marginal"])
        w.writerows(table.tolist())
    summary = {
        "entropy_plugin": grid_entropy(table[:, 1], cell),
        "entropy_marginal": grid_entropy(table[:, 2], cell),
        "mass_plugin": float(table[:, 1].sum() * cell),
        "mass_marginal": float(table[:, 2].sum() * cell),
    }
    print(json.dumps(summary, indent=1))
    print(f"densities in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tolgp", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--backend", choices=("auto", "cython", "python"), default=None,
                    help="sampler kernel backend (default from TOLGP_BACKEND)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, kl=False):
        p.add_argument("--config", required=True, help="TOML file or packaged name (analytic1d, analytic2d, ...)")
        p.add_argument("--strategy", action="append", help="strategy name; repeat or comma-separate")
        p.add_argument("--seeds", type=parse_seeds, help="seed count N (seeds 0..N-1) or comma list")
        p.add_argument("--out", help="output directory (default from config)")
        if kl:
            p.add_argument("--kl-method", choices=("grid", "mcmc"), default="grid")

    p = sub.add_parser("run", help="single experiment per strategy and seed")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("bench", help="multi-strategy, multi-seed benchmark with KL curves")
    common(p, kl=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("kl", help="KL of the true posterior against a saved snapshot")
    p.add_argument("--config", required=True)
    p.add_argument("--snapshot", required=True, help="designs/*.json written by run or bench")
    p.add_argument("--kl-method", choices=("grid", "mcmc"), default="grid")
    p.set_defaults(func=cmd_kl)
    p = sub.add_parser("demo-likelihood", help="plug-in vs marginal likelihood posteriors")
    p.add_argument("--out")
    p.add_argument("--nodes", type=int, default=2000)
    p.add_argument("--zero-variance", action="store_true")
    p.set_defaults(func=cmd_demo)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.backend:
        _backend.use(args.backend)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
