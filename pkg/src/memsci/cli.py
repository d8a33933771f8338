"""``memsci`` command line: solve, fci, dedup-bench, gen-bench, tables, fixture.

Failures print one JSON line on stderr and exit non-zero: 2 for a bad or
unknown flag, 3 for a missing input file, 4 for an infeasible memory budget,
5 for a malformed FCIDUMP, 1 for anything else.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from pathlib import Path

from . import __version__
from .distdedup import DEFAULT_SAMPLES, dedup_bench
from .fixtures import gen_fixture
from .genkernel import virtual_space_for
from .hamiltonian import FCIDumpError, build_tables, dump_tables, parse_fcidump, table_footprint
from .memexec import BudgetInfeasible
from .solver import SolveConfig, sci_iterate, weak_scaling

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_BUDGET = 4
EXIT_FCIDUMP = 5

CSV_FIELDS = ["iteration", "energy", "n_selected", "unique", "redundancy"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load(path: str):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(path)
    with p.open() as fh:
        return parse_fcidump(fh)


def _emit(text: str, path: str | None):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _finite(x: float):
    return None if math.isinf(x) else x


def cmd_solve(args) -> int:
    ints, space = _load(args.fcidump)
    cfg = SolveConfig(
        topk=args.topk,
        eps_gen=args.eps_gen,
        eps_table=args.eps_table,
        ranks=args.ranks,
        samples=args.samples,
        budget_bytes=args.budget_mb * 2**20 if args.budget_mb else math.inf,
        max_iters=args.max_iters,
        tol=args.tol,
        threads=args.threads,
        overlap=not args.no_overlap,
        spill_dir=args.spill_dir,
    )
    result = sci_iterate(ints, space, cfg)
    reports = [r.to_json() for r in result.reports]
    doc = {
        "schema": 1,
        "fcidump": Path(args.fcidump).name,
        "m": space.m,
        "n_elec": space.n_elec,
        "ms2": space.ms2,
        "config": {
            "topk": cfg.topk,
            "eps_gen": cfg.eps_gen,
            "eps_table": cfg.eps_table,
            "ranks": cfg.ranks,
            "samples": cfg.samples,
            "budget_bytes": _finite(cfg.budget_bytes),
            "max_iters": cfg.max_iters,
            "tol": _finite(cfg.tol),
        },
        "reference_energy": result.reference_energy,
        "iterations": reports,
        "energy": result.energy,
        "n_selected": len(result.selected),
        "verdict": result.verdict,
    }
    _emit(_dumps(doc), args.report)
    if args.csv:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in reports:
            writer.writerow([r[k] if k != "energy" else repr(r[k]) for k in CSV_FIELDS])
        Path(args.csv).write_text(buf.getvalue())
    if args.trace:
        trace = result.trace
        Path(args.trace).write_text(
            _dumps(
                {
                    "peak_bytes": result.peak_bytes,
                    "budget_bytes": _finite(result.budget_bytes),
                    "batches": trace.batches,
                    "events": [list(e) for e in trace.events],
                }
            )
        )
    if args.figures:
        from . import plotting

        plotting.convergence(reports, args.figures, args.reference_energy)
    return 0


def cmd_fci(args) -> int:
    from .oracle import fci_energy

    ints, space = _load(args.fcidump)
    energy, _, dets = fci_energy(ints, space)
    sys.stdout.write(json.dumps({"energy": energy, "dimension": len(dets)}) + "\n")
    return 0


def cmd_dedup_bench(args) -> int:
    report = dedup_bench(args.ranks, args.samples, args.keys, args.dist, args.seed)
    _emit(_dumps(report), args.report)
    if args.figures:
        from . import plotting

        plotting.balance(report, args.figures)
    return 0


def cmd_gen_bench(args) -> int:
    ints, space = _load(args.fcidump)
    tables = build_tables(ints, space, args.eps_table)
    ranks = [int(x) for x in args.ranks.split(",")]
    t0 = time.perf_counter()
    points = weak_scaling(ints, space, tables, args.sources_per_rank, ranks, args.eps_gen, args.threads)
    elapsed = time.perf_counter() - t0
    vs = virtual_space_for(space, tables)
    generated = sum(p.generated for p in points)
    doc = {
        "schema": 1,
        "fcidump": Path(args.fcidump).name,
        "sources_per_rank": args.sources_per_rank,
        "virtual_space": {"n_single": vs.n_single, "n_double": vs.n_double},
        "points": [p.to_json() for p in points],
        "records_per_sec": generated / elapsed if elapsed > 0 else None,
    }
    _emit(_dumps(doc), args.report)
    if args.csv:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["ranks", "sources", "generated", "unique", "unique_ratio"])
        for p in points:
            writer.writerow([p.ranks, p.sources, p.generated, p.unique, repr(p.unique_ratio)])
        Path(args.csv).write_text(buf.getvalue())
    if args.figures:
        from . import plotting

        plotting.scaling(doc["points"], args.figures)
    return 0


def cmd_tables(args) -> int:
    ints, space = _load(args.fcidump)
    tables = build_tables(ints, space, args.eps_table)
    vs = virtual_space_for(space, tables)
    doc = {
        "m": space.m,
        "n_elec": space.n_elec,
        "eps_table": args.eps_table,
        "max_single_size": tables.max_single_size,
        "max_double_size": tables.max_double_size,
        "footprint_bytes": table_footprint(tables),
        "n_single": vs.n_single,
        "n_double": vs.n_double,
    }
    if args.out:
        Path(args.out).write_bytes(dump_tables(tables))
    sys.stdout.write(_dumps(doc))
    return 0


def cmd_fixture(args) -> int:
    _emit(gen_fixture(args.seed, args.m, args.n, args.density, args.strength, args.gap), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="memsci", description="Memory-budgeted selected configuration interaction.")
    p.add_argument("--version", action="version", version=f"memsci {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="run the selected-CI loop on an FCIDUMP")
    s.add_argument("--fcidump", required=True)
    s.add_argument("--topk", type=int, default=10, help="configurations added to S per iteration")
    s.add_argument("--eps-gen", type=float, default=0.0)
    s.add_argument("--eps-table", type=float, default=0.0)
    s.add_argument("--ranks", type=int, default=1)
    s.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    s.add_argument("--budget-mb", type=float, default=None)
    s.add_argument("--spill-dir", default=None)
    s.add_argument("--no-overlap", action="store_true")
    s.add_argument("--max-iters", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--report", default=None, help="JSON report path (stdout if omitted)")
    s.add_argument("--csv", default=None)
    s.add_argument("--trace", default=None, help="stage timings and peak bytes (not deterministic)")
    s.add_argument("--figures", default=None, metavar="DIR")
    s.add_argument("--reference-energy", type=float, default=None, help="plot errors against this energy")
    s.set_defaults(func=cmd_solve)

    f = sub.add_parser("fci", help="exact diagonalization (small systems only)")
    f.add_argument("--fcidump", required=True)
    f.set_defaults(func=cmd_fci)

    d = sub.add_parser("dedup-bench", help="distributed de-duplication on synthetic keys")
    d.add_argument("--ranks", type=int, default=4)
    d.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    d.add_argument("--keys", type=int, default=1_000_000)
    d.add_argument("--dist", default="uniform", help="uniform or zipf:THETA")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--report", default=None)
    d.add_argument("--figures", default=None, metavar="DIR")
    d.set_defaults(func=cmd_dedup_bench)

    g = sub.add_parser("gen-bench", help="weak-scaling generation and redundancy sweep")
    g.add_argument("--fcidump", required=True)
    g.add_argument("--sources-per-rank", type=int, default=500)
    g.add_argument("--ranks", default="1,2,4", help="comma-separated rank counts")
    g.add_argument("--eps-gen", type=float, default=0.0)
    g.add_argument("--eps-table", type=float, default=0.0)
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("--report", default=None)
    g.add_argument("--csv", default=None)
    g.add_argument("--figures", default=None, metavar="DIR")
    g.set_defaults(func=cmd_gen_bench)

    t = sub.add_parser("tables", help="build excitation tables and report their size")
    t.add_argument("--fcidump", required=True)
    t.add_argument("--eps-table", type=float, default=0.0)
    t.add_argument("--out", default=None, help="write the binary table blob here")
    t.set_defaults(func=cmd_tables)

    x = sub.add_parser("fixture", help="write a random-integral FCIDUMP")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--m", type=int, required=True, help="spin orbitals")
    x.add_argument("--n", type=int, required=True, help="electrons")
    x.add_argument("--density", type=float, default=1.0)
    x.add_argument("--strength", type=float, default=0.05)
    x.add_argument("--gap", type=float, default=0.6)
    x.add_argument("--out", default=None)
    x.set_defaults(func=cmd_fixture)
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        path = exc.filename or (exc.args[0] if exc.args else "")
        return _fail(EXIT_MISSING, "missing_file", f"no such file: {path}", path=str(path))
    except BudgetInfeasible as exc:
        return _fail(EXIT_BUDGET, "budget_infeasible", str(exc))
    except FCIDumpError as exc:
        return _fail(EXIT_FCIDUMP, "fcidump", str(exc), line=exc.line)
    except ValueError as exc:
        return _fail(EXIT_USAGE, "invalid_argument", str(exc))
    except Exception as exc:
        return _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
