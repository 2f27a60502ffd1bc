"""Command-line entry point: ``smkv simulate|ladder <config> [options]``."""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from smkv import harness


def _set_threads(k: int) -> None:
    os.environ["OMP_NUM_THREADS"] = str(k)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smkv", description=(
        "Weighted particle systems with common noise and their mean-field PDE limits on the torus."))
    p.add_argument("command", choices=["simulate", "ladder"],
                   help="simulate: one particle run at the fixed parameters; "
                        "ladder: every configured sweep with gap tables")
    p.add_argument("config", type=Path, help="INI configuration file (or a run manifest)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads (replications and kernels)")
    p.add_argument("--check", action="store_true", help="validate the configuration and exit")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = harness.load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise harness.ConfigError(f"seed must be an unsigned 64-bit integer, got {args.seed}")
            cfg = cfg.with_seed(args.seed)
    except harness.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.check:
        print(f"config OK  hash={cfg.config_hash}  seed={cfg.seed}")
        return 0

    _set_threads(args.threads)
    start = time.perf_counter()
    if args.command == "simulate":
        run, table = harness.simulate(cfg, args.threads)
        wall = time.perf_counter() - start
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        name = f"simulate_{cfg.config_hash[:12]}"
        harness.write_particle_observables(out / f"observables_{name}.csv", run, cfg.test_functions)
        harness.emit_manifest(out / f"manifest_{name}.txt", cfg, table, "simulate", wall)
        print(f"wrote {out / f'observables_{name}.csv'}")
        return 0

    table = harness.run_limit_ladder(cfg, args.threads)
    wall = time.perf_counter() - start
    paths = harness.write_outputs(args.out, cfg, table, "ladder", wall)
    for r in table.rows:
        print(f"{r.axis:>14} {harness._fmt(r.axis_value):>8} {r.test_fn:>6} "
              f"{r.mean_gap:.4e} +- {r.stderr:.1e}")
    print(f"wrote {paths['gaps']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
