"""Command-line interface.

::

    gphm solve --config run.cfg
    gphm benchmark --suite desk --out results/
    gphm verify --kind kron

Exit codes: 0 success, 1 run failure, 2 configuration or usage error.
``GPHM_THREADS`` caps the BLAS thread pool.
"""

import os
import sys

# thread caps must be in place before numpy loads its BLAS
_threads = os.environ.get("GPHM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import csv  # noqa: E402
import logging  # noqa: E402
import time  # noqa: E402

import numpy as np  # noqa: E402

from .config import RunConfig, load_config  # noqa: E402
from .errors import ConfigError, DomainError  # noqa: E402
from .run import solve, write_outputs  # noqa: E402
from .verify import CHECKS  # noqa: E402

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("gphm")


def _progress(record):
    log.info(
        "iter %d  loss %.6g  boundary_mse %.3e  residual_mse %.3e  (%.1fs)",
        record.iteration,
        record.loss,
        record.boundary_mse,
        record.residual_mse,
        record.wall_seconds,
    )


def cmd_solve(args):
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = args.out or config.output_dir
    try:
        result = solve(config, callback=_progress)
    except DomainError as exc:
        # bad problem id or grid in an otherwise well-formed file
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    write_outputs(result, out_dir)
    print(f"rel_l2 {result.rel_l2:.6e}  iterations {result.trace.iterations_run}  -> {out_dir}")
    return EXIT_OK


# (problem id, grid sizes, kernel, Q, F, max_iters)
DESK_SUITE = (
    ("poisson1d_mix:k=20", (400,), "stm", 10, 10.0, 50_000),
    ("poisson1d_mix:k=20", (400,), "gm", 10, 10.0, 50_000),
    ("poisson1d_mix:k=20", (400,), "se", 1, 0.0, 50_000),
    ("poisson1d_mix:k=20", (400,), "matern52", 1, 0.0, 50_000),
    ("poisson1d_sin:k=20", (400,), "stm", 10, 10.0, 50_000),
    ("poisson1d_sin:k=20", (50,), "stm", 10, 10.0, 50_000),
    ("allencahn1d_sin:k=20", (400,), "stm", 10, 10.0, 50_000),
    ("poisson2d_sin:k=5", (40, 40), "stm", 10, 5.0, 20_000),
    ("allencahn2d_mix:k=10", (40, 40), "stm", 10, 5.0, 20_000),
    ("advection1d:c=2", (60, 30), "stm", 10, 5.0, 20_000),
)

PAPER_SUITE = tuple(
    (pid, sizes, kernel, 30, F, 1_000_000)
    for pid, sizes, F in (
        ("poisson1d_u1", (400,), 20.0),
        ("poisson1d_u2", (400,), 20.0),
        ("poisson1d_u3", (400,), 20.0),
        ("poisson1d_u4", (600,), 40.0),
        ("poisson1d_u5", (900,), 100.0),
        ("poisson2d_u6", (200, 200), 20.0),
        ("poisson2d_u7", (200, 200), 20.0),
        ("allencahn1d_u1", (400,), 20.0),
        ("allencahn1d_u2", (400,), 20.0),
        ("allencahn2d", (200, 200), 20.0),
        ("advection1d", (200, 200), 40.0),
    )
    for kernel in ("stm", "gm")
)

SUITES = {"desk": DESK_SUITE, "paper": PAPER_SUITE}
BENCH_HEADER = ("problem", "kernel", "grid", "rel_l2", "iterations", "seconds", "status")


def cmd_benchmark(args):
    rows = SUITES[args.suite]
    os.makedirs(args.out, exist_ok=True)
    table = []
    failed = False
    for i, (pid, sizes, kernel, q, f, iters) in enumerate(rows):
        if args.max_iters is not None:
            iters = min(iters, args.max_iters)
        config = RunConfig(
            problem=pid,
            grid_sizes=sizes,
            kernel=kernel,
            Q=q,
            F=f,
            max_iters=iters,
            seed=args.seed,
            output_dir=os.path.join(args.out, f"{i:02d}_{pid.replace(':', '_').replace('=', '')}_{kernel}"),
        )
        grid = "x".join(map(str, sizes))
        start = time.perf_counter()
        try:
            result = solve(config)
            write_outputs(result, config.output_dir)
            row = (pid, kernel, grid, repr(result.rel_l2), result.trace.iterations_run, "ok")
        except Exception as exc:  # every row is attempted; failures are recorded
            failed = True
            row = (pid, kernel, grid, "", "", f"failed: {type(exc).__name__}: {exc}")
        seconds = time.perf_counter() - start
        table.append(row[:5] + (f"{seconds:.1f}",) + row[5:])
        print("  ".join(str(v) for v in table[-1]), flush=True)
    with open(os.path.join(args.out, "results.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        w.writerows(table)
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_verify(args):
    results = CHECKS[args.kind]()
    for r in results:
        print(r.line())
    bad = [r for r in results if not r.passed]
    if bad:
        print(f"{len(bad)} of {len(results)} checks failed: " + ", ".join(f"{r.module}.{r.op}" for r in bad))
        return EXIT_FAILURE
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="gphm", description=__doc__.split("\n\n")[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress progress logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="train on one problem from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("benchmark", help="run a problem suite")
    p.add_argument("--suite", required=True, choices=sorted(SUITES))
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=int, help="cap the iteration budget of every row")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("verify", help="run a self-check suite")
    p.add_argument("--kind", required=True, choices=sorted(CHECKS))
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
