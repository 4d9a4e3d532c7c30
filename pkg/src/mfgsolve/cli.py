"""Command-line driver: experiment orchestration and CSV persistence.

Subcommands: solve, compare-newton, order-study, truncation-study, spectra,
mass-audit, check.  Every output CSV carries a header row and a leading
comment line recording the config hash.  Exit codes: 0 success, 2 config
error, 3 solver failure, 4 self-test failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time


def _apply_threads(argv):
    """Pin BLAS/OpenMP pools before numpy is imported (determinism at 1)."""
    n = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    if n is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mfg",
        description="Forward-backward mean field game solver "
                    "(alternating sweeping with relaxation and a multiscale hierarchy)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config file (INI)")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS/OpenMP thread cap (1 guarantees determinism)")
        p.add_argument("--seed", type=int, default=0, help="seed for random probes")
        p.add_argument("--level-override", nargs=2, type=int, metavar=("L0", "L"),
                       default=None, help="override the level range")

    for name, help_text in [
        ("solve", "run the configured solve (multiscale or single level)"),
        ("compare-newton", "time coupled Newton against alternating sweeping"),
        ("order-study", "convergence-order table against a fine reference"),
        ("truncation-study", "manufactured-solution truncation slopes"),
        ("spectra", "finite-difference Jacobians, sweep spectral radius, alpha bound"),
        ("mass-audit", "total mass per frame of the computed density"),
        ("check", "run the invariant self-test suite"),
    ]:
        p = sub.add_parser(name, help=help_text)
        common(p)
        if name == "check":
            p.add_argument("--self-test", action="store_true", default=True)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    args = _build_parser().parse_args(argv)

    from .errors import ConfigError, MfgError

    try:
        from . import _cli_impl as impl

        return impl.dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MfgError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
