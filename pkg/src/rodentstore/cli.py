"""``rodentstore`` command line."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

from . import bench as bh
from .access import AccessError, CostModel, Predicate, scan, scan_cost
from .advisor import AdvisorError, TableStats, Workload, baseline, recommend
from .algebra import ScalarType, SchemaError, bind_check, schema_to_text
from .encoding import DecodeError
from .engine import EvalError
from .pagefile import Counters, PageFileError
from .parser import ParseError, format_expr, parse_program
from .storage import Database, StorageError, plan_render

MIN_PAGE_SIZE = 4096


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", f"{self.prog}: {message}")
        raise SystemExit(2)


def _emit_error(kind: str, message: str, **extra) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")


# --------------------------------------------------------------------------
# helpers

def _counter_path(db_path: str) -> str:
    return db_path + ".io.json"


def _load_counters(db_path: str) -> Counters:
    try:
        with open(_counter_path(db_path), encoding="utf-8") as fh:
            return Counters(**json.load(fh))
    except FileNotFoundError:
        return Counters()


def _save_counters(db_path: str, c: Counters) -> None:
    with open(_counter_path(db_path), "w", encoding="utf-8") as fh:
        json.dump(c.as_dict(), fh)


class _Session:
    """An open database whose IO counters accumulate in a sidecar file across invocations."""

    def __init__(self, args, create: bool = False):
        self.path = args.db
        if create and not os.path.exists(self.path):
            self.db = Database.create(self.path, args.page_size)
        else:
            if not os.path.exists(self.path):
                raise CliError(f"no database at {self.path}")
            self.db = Database.open(self.path)

    def __enter__(self) -> Database:
        return self.db

    def __exit__(self, *exc):
        total = _load_counters(self.path)
        c = self.db.pf.counters
        _save_counters(self.path, Counters(total.pages_read + c.pages_read,
                                           total.pages_written + c.pages_written,
                                           total.seeks + c.seeks))
        self.db.close()


def _model(args) -> CostModel:
    return CostModel(args.seek_ms, args.transfer_ms_per_byte)


def _convert(value: str, kind: ScalarType):
    if kind is ScalarType.INT:
        return int(value)
    if kind is ScalarType.FLOAT:
        return float(value)
    return value


def _split(text: str | None) -> list[str]:
    return [p.strip() for p in (text or "").split(",") if p.strip()]


def _full_scan_ms(db: Database, plan, model: CostModel) -> float:
    # one seek per segment, every page of every segment
    pages = sum(max(1, -(-len(s.data) // db.page_size)) for s in plan.segments)
    return model.cost(len(plan.segments), pages, db.page_size)


def _table_stats(db: Database, name: str) -> TableStats:
    t = db.tables[name]
    with db.pf.uncounted():
        records = list(scan(db, name))
    return TableStats.from_records(name, t.labels, [_kind_of(t.schema, a) for a in t.labels], records)


def _kind_of(schema, attr: str) -> ScalarType:
    for c in schema.children:
        if c.label == attr:
            return c.inner.kind
    raise CliError(f"unknown attribute {attr}")


# --------------------------------------------------------------------------
# commands

def cmd_create(args) -> int:
    with _Session(args, create=True) as db:
        db.create_table(args.table, args.schema)
        print(f"created {args.table}({schema_to_text(db.tables[args.table].schema)})")
    return 0


def cmd_load(args) -> int:
    with _Session(args) as db:
        t = db.tables.get(args.table)
        if t is None:
            raise CliError(f"no table named {args.table}")
        kinds = [_kind_of(t.schema, a) for a in t.labels]
        with open(args.csv, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [a for a in t.labels if a not in (reader.fieldnames or [])]
            if missing:
                raise CliError(f"{args.csv}: missing column(s) {', '.join(missing)}")
            rows = [tuple(_convert(r[a], k) for a, k in zip(t.labels, kinds)) for r in reader]
        db.load(args.table, rows)
        print(f"loaded {len(rows)} records into {args.table} ({db.tables[args.table].record_count} total)")
    return 0


def cmd_layout(args) -> int:
    with open(args.file, encoding="utf-8") as fh:
        text = fh.read()
    program = parse_program(text)
    expr = program.inlined()
    with _Session(args) as db:
        t = db.tables.get(args.table)
        if t is None:
            raise CliError(f"no table named {args.table}")
        errors = bind_check(expr, {args.table: t.labels})
        if errors:
            first = errors[0]
            extra = {"line": first.span.line, "column": first.span.column} if first.span else {}
            _emit_error("BindError", "; ".join(str(e) for e in errors), **extra)
            return 1
        canonical = format_expr(expr)
        model = _model(args)
        print(canonical)
        if args.apply:
            db.reorganize(args.table, expr, allow_drop=args.allow_drop)
            print(f"applied; {db.tables[args.table].bytes_on_disk()} bytes on disk")
            return 0
        with db.pf.uncounted():
            current = scan_cost(db, args.table, model=model)
            plan = plan_render(db.logical_table(args.table), expr, args.allow_drop)
        new = _full_scan_ms(db, plan, model)
        print(f"full-scan cost: current {current:.3f} ms, new {new:.3f} ms, delta {new - current:+.3f} ms")
    return 0


def cmd_query(args) -> int:
    fields = _split(args.project) or None
    pred = Predicate.parse(args.where) if args.where else None
    order = _split(args.order) or None
    with _Session(args) as db:
        rows = scan(db, args.table, fields, pred, order, _model(args))
        labels = fields or list(db.tables[args.table].labels)
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(labels)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return 0


def cmd_stats(args) -> int:
    with _Session(args) as db:
        info = db.stats()
    info["counters"] = _load_counters(args.db).as_dict()
    if args.reset:
        _save_counters(args.db, Counters())
        info["counters_reset"] = True
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def cmd_advise(args) -> int:
    if args.strategy == "anneal" and args.seed is None:
        raise CliError("anneal needs an explicit --seed")
    workload = Workload.read_csv(args.workload)
    with _Session(args) as db:
        if args.table not in db.tables:
            raise CliError(f"no table named {args.table}")
        stats = _table_stats(db, args.table)
        model = _model(args)
        base = baseline(stats, workload, model, db.page_size)
        best = recommend(stats, workload, args.budget, args.strategy, args.seed or 0, model, db.page_size)
    print(best.expr)
    print(f"estimated cost {best.estimated_cost:.3f} ms (row baseline {base.estimated_cost:.3f} ms)")
    if best.provenance:
        print("moves: " + ", ".join(best.provenance))
    if best.warning:
        _emit_error("AdvisorWarning", best.warning)
        return 1
    return 0


def _bench_config(args) -> bh.BenchConfig:
    cfg = bh.BenchConfig(seed=args.seed)
    for flag, name in (("points", "n_points"), ("vehicles", "n_vehicles"), ("queries", "n_queries"),
                       ("coverage", "coverage"), ("grid_cells", "grid_cells")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg = replace(cfg, **{name: v})
    if args.page_size_explicit:
        cfg = replace(cfg, page_size=args.page_size)
    cfg.validate()
    return cfg


def cmd_bench(args) -> int:
    cfg = _bench_config(args)
    if args.bench_cmd == "gen-traces":
        bh.gen_traces(cfg, args.out)
        print(f"wrote {cfg.n_points} trace records to {args.out}")
    elif args.bench_cmd == "gen-workload":
        bh.gen_workload(cfg, args.out)
        print(f"wrote {cfg.n_queries} queries to {args.out}")
    else:
        layouts = _split(args.layouts) or list(bh.LAYOUTS)
        if os.path.exists(args.db):
            db = Database.open(args.db)
        else:
            db = Database.create(args.db, cfg.page_size)
        try:
            bh.prepare(db, bh.read_traces(args.traces), cfg, layouts)
            report = bh.run_benchmark(db, layouts, bh.read_workload(args.workload), _model(args))
        finally:
            db.close()
        if args.report:
            bh.emit_report(report, args.report)
        sys.stdout.write(bh.format_report(report))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rodentstore", description="Declarative adaptive storage engine.")
    p.add_argument("--page-size", type=int, default=None, help="page size in bytes for new databases")
    p.add_argument("--seek-ms", type=float, default=10.0)
    p.add_argument("--transfer-ms-per-byte", type=float, default=1e-5)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    c = sub.add_parser("create", help="create a table (and the database file if needed)")
    c.add_argument("db")
    c.add_argument("table")
    c.add_argument("schema", help="e.g. t:int,lat:float,lon:float,id:string")
    c.set_defaults(fn=cmd_create)

    c = sub.add_parser("load", help="append CSV records to a table")
    c.add_argument("db")
    c.add_argument("table")
    c.add_argument("csv")
    c.set_defaults(fn=cmd_load)

    c = sub.add_parser("layout", help="check, cost or apply a layout expression file")
    c.add_argument("db")
    c.add_argument("table")
    c.add_argument("file")
    c.add_argument("--apply", action="store_true")
    c.add_argument("--allow-drop", action="store_true", help="let the layout drop attributes")
    c.set_defaults(fn=cmd_layout)

    c = sub.add_parser("query", help="scan a table, printing CSV")
    c.add_argument("db")
    c.add_argument("table")
    c.add_argument("--project")
    c.add_argument("--where")
    c.add_argument("--order")
    c.set_defaults(fn=cmd_query)

    c = sub.add_parser("stats", help="catalog and IO counters")
    c.add_argument("db")
    c.add_argument("--reset", action="store_true")
    c.set_defaults(fn=cmd_stats)

    c = sub.add_parser("advise", help="recommend a layout for a workload")
    c.add_argument("db")
    c.add_argument("table")
    c.add_argument("workload")
    c.add_argument("--budget", type=int, default=200)
    c.add_argument("--strategy", choices=("greedy", "anneal"), default="greedy")
    c.add_argument("--seed", type=int)
    c.set_defaults(fn=cmd_advise)

    b = sub.add_parser("bench", help="case-study benchmark")
    bs = b.add_subparsers(dest="bench_cmd", required=True, parser_class=_Parser)
    for name in ("gen-traces", "gen-workload"):
        g = bs.add_parser(name)
        g.add_argument("out")
        g.add_argument("--seed", type=int, required=True)
        g.add_argument("--points", type=int)
        g.add_argument("--vehicles", type=int)
        g.add_argument("--queries", type=int)
        g.add_argument("--coverage", type=float)
    r = bs.add_parser("run")
    r.add_argument("db")
    r.add_argument("traces")
    r.add_argument("workload")
    r.add_argument("--layouts", help="comma-separated subset of " + ",".join(bh.LAYOUTS))
    r.add_argument("--report")
    r.add_argument("--grid-cells", type=int)
    r.add_argument("--seed", type=int, default=42)
    b.set_defaults(fn=cmd_bench)
    return p


_ERRORS = (AccessError, AdvisorError, bh.BenchError, CliError, DecodeError, EvalError, PageFileError,
           SchemaError, StorageError, ValueError, KeyError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.page_size_explicit = args.page_size is not None
    if args.page_size is None:
        args.page_size = int(os.environ.get("RODENTSTORE_PAGE_SIZE", 8192))
    try:
        if args.page_size < MIN_PAGE_SIZE and args.cmd != "bench":
            raise CliError(f"page size must be at least {MIN_PAGE_SIZE} bytes outside benchmarks")
        return args.fn(args)
    except ParseError as ex:
        _emit_error("ParseError", str(ex), line=ex.span.line, column=ex.span.column, expected=ex.expected)
    except _ERRORS as ex:
        if args.verbose:
            import traceback
            traceback.print_exc()
        _emit_error(type(ex).__name__, str(ex.args[0]) if isinstance(ex, KeyError) and ex.args else str(ex))
    return 1


if __name__ == "__main__":
    sys.exit(main())
