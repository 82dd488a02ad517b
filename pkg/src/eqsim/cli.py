"""Command line interface.

    eqsim run <config.json> [--workers N] [--out DIR]
    eqsim compare <config.json>... [--workers N] [--out DIR]

Exit codes: 0 ok, 1 configuration error, 2 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, EqsimError
from .runner import compare, run

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqsim", description="EQS transient field simulations")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=None)
    r.add_argument("--out", default=None, help="output directory (overrides the config)")
    c = sub.add_parser("compare", help="run several scenarios of one problem and tabulate costs")
    c.add_argument("configs", nargs="+")
    c.add_argument("--workers", type=int, default=None)
    c.add_argument("--out", default=None)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            res = run(load_config(args.config), args.out, args.workers)
            s = res.summary
            print(f"{s['name']}: {s['steps_accepted']} steps ({s['steps_rejected']} rejected), "
                  f"{s['pcg_iterations']} PCG iterations, {s['m_solves']} M-solves, "
                  f"{s['precond_setups']} preconditioner setups, {s['wall_time']:.2f} s")
            if res.status:
                print(f"error: {res.message}", file=sys.stderr)
            return res.status
        cfgs = [load_config(p) for p in args.configs]
        try:
            cmp = compare(cfgs, args.out, args.workers)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(cmp.table())
        return EXIT_SOLVER if any(r["status"] for r in cmp.rows) else EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EqsimError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    raise SystemExit(main())
