"""``cradapt`` command line: solve, adapt, audit, reference, mesh-info."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .bench import ConfigError, NumericalFailure, parse_config, run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cradapt", description=__doc__)
    sub = p.add_subparsers(dest="mode", required=True)
    for mode in ("solve", "adapt", "audit", "reference", "mesh-info"):
        s = sub.add_parser(mode)
        s.add_argument("--config", help="key = value file with [run]/[adapt]/... sections")
        s.add_argument("--domain", help="unit_square(n), square_ring or file:<path>")
        s.add_argument("--theta", type=float)
        s.add_argument("--nev", type=int)
        s.add_argument("--max-dof", dest="max_dof", type=int)
        s.add_argument("--marking", help="cluster or single:<k>")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--figures", action="store_const", const=True,
                       help="also render PNG figures (needs matplotlib)")
        s.add_argument("--no-timing", dest="timing", action="store_const", const=False,
                       help="write 0 in the seconds column so outputs are reproducible")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _limit_threads():
    n = os.environ.get("CR_ADAPT_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in
                 ("domain", "theta", "nev", "max_dof", "marking", "seed", "out",
                  "figures", "timing")}
    overrides["mode"] = args.mode
    try:
        cfg = parse_config(args.config, overrides=overrides)
        _limiter = _limit_threads()
        result = run(cfg)
    except ConfigError as exc:
        print(f"cradapt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"cradapt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if args.mode == "mesh-info":
        print(json.dumps(result, indent=2))
    elif args.mode == "solve":
        for k, (a, b) in enumerate(zip(result["values"], result["conforming"]), 1):
            print(f"lambda_{k}: CR {a:.10g}  conforming {b:.10g}")
    elif args.mode == "adapt":
        last = result["records"][-1]
        print(f"iterations {len(result['records'])}  ndof {last.ndof}  "
              f"lambda {' '.join(f'{x:.8g}' for x in last.eigenvalues)}")
    elif args.mode == "reference":
        for k, e in enumerate(result["estimates"], 1):
            print(f"lambda_{k}: {e.value:.10g}  (residual {e.residual:.2e})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
