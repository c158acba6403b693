"""Cost-based layout search.

Costs come from table statistics alone (row count, value ranges, average
widths) under a uniform-distribution assumption: the advisor lays out a
hypothetical render page by page and prices each query's page runs with
the same planner the scan path uses.
"""
from __future__ import annotations

import csv
import math
import random
import statistics
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .access import CostModel, Predicate, plan_runs
from .algebra import ScalarType
from .encoding import FIXEDPOINT_SCALE, encode_varint, zigzag
from .transforms import morton_code

MAX_GRID_CELLS = 1 << 20


class AdvisorError(ValueError):
    pass


# --------------------------------------------------------------------------
# inputs

@dataclass(frozen=True)
class AttrStats:
    kind: ScalarType
    low: float | None
    high: float | None
    width: float


@dataclass(frozen=True)
class TableStats:
    name: str
    labels: tuple
    attrs: dict   # label -> AttrStats
    rows: int

    @classmethod
    def from_records(cls, name: str, labels: Sequence[str], kinds: Sequence[ScalarType],
                     records: Sequence[Sequence]) -> "TableStats":
        attrs = {}
        n = len(records)
        for i, (lab, kind) in enumerate(zip(labels, kinds)):
            if kind is ScalarType.STR:
                total = sum(len(encode_varint(len(r[i].encode()))) + len(r[i].encode()) for r in records)
                attrs[lab] = AttrStats(kind, None, None, total / n if n else 1.0)
            else:
                vals = [r[i] for r in records]
                attrs[lab] = AttrStats(kind, min(vals) if vals else 0, max(vals) if vals else 0, 8.0)
        return cls(name, tuple(labels), attrs, n)

    @property
    def record_width(self) -> float:
        return sum(self.attrs[a].width for a in self.labels)

    def numeric(self, a: str) -> bool:
        return self.attrs[a].kind is not ScalarType.STR


@dataclass(frozen=True)
class Query:
    fields: tuple
    predicate: Predicate = field(default_factory=Predicate)
    order: tuple = ()
    freq: float = 1.0

    def __post_init__(self):
        if not self.freq > 0:
            raise AdvisorError("query frequency must be positive")


@dataclass(frozen=True)
class Workload:
    queries: tuple = ()

    def scaled(self, k: float) -> "Workload":
        return Workload(tuple(replace(q, freq=q.freq * k) for q in self.queries))

    def validate(self, labels: Sequence[str]) -> None:
        for q in self.queries:
            for a in set(q.fields) | q.predicate.attrs | {a for a, _ in q.order}:
                if a not in labels:
                    raise AdvisorError(f"workload references unknown attribute {a}")

    @classmethod
    def read_csv(cls, path: str) -> "Workload":
        """Read ``fields,low<attr>,high<attr>,...,freq`` rows (all columns but
        one range pair optional); without a fields column a query returns
        the attributes it constrains."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        queries = []
        for row in rows:
            ranges = []
            attrs = sorted({k[3:] for k in row if k.startswith("low")} | {k[4:] for k in row if k.startswith("high")})
            for a in attrs:
                lo, hi = row.get("low" + a, ""), row.get("high" + a, "")
                if lo == "" and hi == "":
                    continue
                ranges.append((a, float(lo) if lo != "" else -math.inf, float(hi) if hi != "" else math.inf))
            fields = tuple(f for f in (row.get("fields") or "").split(";") if f) or tuple(a for a, _, _ in ranges)
            order = tuple((o.split()[0], o.split()[1] if len(o.split()) > 1 else "ASC")
                          for o in (row.get("order") or "").split(";") if o.strip())
            freq = float(row["freq"]) if row.get("freq") else 1.0
            queries.append(Query(fields, Predicate(tuple(ranges)), order, freq))
        return cls(tuple(queries))


# --------------------------------------------------------------------------
# design states and their expressions

@dataclass(frozen=True)
class Design:
    groups: tuple | None = None       # column groups, None for a row layout
    grid: tuple | None = None         # (attr_a, attr_b, stride_a, stride_b)
    zorder: bool = False
    delta: bool = False
    sort: str | None = None           # orderby attribute of a row layout

    @property
    def transforms(self) -> int:
        return (self.groups is not None) + (self.grid is not None) + self.zorder + self.delta + (self.sort is not None)

    def expression(self, stats: TableStats) -> str:
        t = stats.name
        if self.grid is not None:
            a, b, sa, sb = self.grid
            e = f"grid[{a}:{_num(sa)}, {b}:{_num(sb)}]({t})"
            if self.zorder:
                e = f"zorder({e})"
            if self.delta:
                e = f"delta[{a}, {b}]({e})"
            return e
        if self.groups is not None:
            parts = []
            for g in self.groups:
                head = f"r.{g[0]}" if len(g) == 1 else "[" + ", ".join(f"r.{a}" for a in g) + "]"
                parts.append(f"[{head} | \\r <- {t}]")
            return "[" + ", ".join(parts) + "]"
        head = "[" + ", ".join(f"r.{a}" for a in stats.labels) + "]"
        clause = f", orderby r.{self.sort} ASC" if self.sort else ""
        e = f"[{head} | \\r <- {t}{clause}]"
        if self.delta and self.sort:
            e = f"delta[{self.sort}]({e})"
        return e


def _num(x: float) -> str:
    return repr(float(x))


@dataclass
class Candidate:
    expr: str
    estimated_cost: float
    provenance: tuple = ()
    design: Design = field(default_factory=Design)
    warning: str | None = None

    @property
    def has_grid(self) -> bool:
        return self.design.grid is not None


# --------------------------------------------------------------------------
# cost model over statistics

def _varint_bytes(v: float) -> float:
    return float(len(encode_varint(zigzag(int(round(v))))))


def _delta_width(stats: TableStats, attr: str, spread: float) -> float:
    # expected size of one delta value when consecutive values differ by ~spread/3
    scale = FIXEDPOINT_SCALE if stats.attrs[attr].kind is ScalarType.FLOAT else 1
    return _varint_bytes(spread / 3 * scale)


@dataclass
class _Layout:
    """Hypothetical on-disk placement used to price queries."""
    segments: list              # (labels set, first_page, byte_start, byte_len)
    grid: tuple | None = None   # (attr_a, attr_b, lows, strides, shape, cell_bytes, ranks)
    dir_pages: int = 0


class Estimator:
    def __init__(self, stats: TableStats, model: CostModel | None = None, page_size: int = 8192):
        if not stats.labels:
            raise AdvisorError("empty schema")
        self.stats = stats
        self.model = model or CostModel()
        self.page_size = page_size
        self.evaluations = 0
        self.priced_valid = False   # a design other than the row baseline got a finite cost
        self._cache: dict = {}

    def layout(self, d: Design) -> _Layout | None:
        s = self.stats
        n = s.rows
        ps = self.page_size
        variable = any(not s.numeric(a) for a in s.labels)
        if d.grid is not None:
            a, b, sa, sb = d.grid
            lows = (s.attrs[a].low, s.attrs[b].low)
            spans = (s.attrs[a].high - lows[0], s.attrs[b].high - lows[1])
            shape = (math.floor(spans[0] / sa) + 1, math.floor(spans[1] / sb) + 1)
            ncells = shape[0] * shape[1]
            if ncells > MAX_GRID_CELLS:
                return None
            width = s.record_width
            if d.delta:
                width += _delta_width(s, a, sa) + _delta_width(s, b, sb) - 16
            cell_bytes = n * width / ncells
            if d.zorder:
                codes = sorted((morton_code(i, j), i, j) for i in range(shape[0]) for j in range(shape[1]))
                ranks = {(i, j): r for r, (_, i, j) in enumerate(codes)}
            else:
                ranks = None
            dir_bytes = ncells * (2 * len(encode_varint(max(shape))) * 2 + 32 + 3 * 3)
            seg = [(set(s.labels), 1, 0, n * width)]
            return _Layout(seg, (a, b, lows, (sa, sb), shape, cell_bytes, ranks), max(1, math.ceil(dir_bytes / ps)))
        groups = d.groups if d.groups is not None else (tuple(s.labels),)
        segs = []
        page = 1
        for g in groups:
            width = sum(s.attrs[x].width for x in g)
            var = any(not s.numeric(x) for x in g)
            start = 8 * n if (var and not d.delta) else 0
            if d.delta and d.sort in g:
                # sorted values step by about range / n
                step = (s.attrs[d.sort].high - s.attrs[d.sort].low) / max(n, 1)
                width += _delta_width(s, d.sort, 3 * step) - 8
            start += 2  # skeleton
            total = start + n * width
            segs.append((set(g), page, start, n * width))
            page += max(1, math.ceil(total / ps))
        return _Layout(segs)

    def query_io(self, d: Design, q: Query) -> tuple[int, int]:
        """(pages, seeks) of one query under design `d`."""
        lay = self.layout(d)
        ps = self.page_size
        need = set(q.fields) | q.predicate.attrs | {a for a, _ in q.order}
        pages: set[int] = set()
        if lay.grid is not None:
            a, b, lows, strides, shape, cell_bytes, ranks = lay.grid
            rng = []
            for k, attr in enumerate((a, b)):
                lo, hi, inclusive = q.predicate.box(attr)
                top = self.stats.attrs[attr].high
                if hi < lo or (not inclusive and hi <= lo) or lo > top or hi < lows[k]:
                    return 0, 0
                i0 = max(0, math.floor((lo - lows[k]) / strides[k])) if lo > -math.inf else 0
                i1 = min(shape[k] - 1, math.floor((min(hi, top) - lows[k]) / strides[k]))
                rng.append((i0, i1))
            for i in range(rng[0][0], rng[0][1] + 1):
                for j in range(rng[1][0], rng[1][1] + 1):
                    r = ranks[(i, j)] if ranks is not None else i * shape[1] + j
                    start = r * cell_bytes
                    end = start + cell_bytes
                    if end > start:
                        pages.update(range(1 + int(start // ps), 1 + int(math.ceil(end / ps))))
            runs = plan_runs(pages, ps, self.model)
            return sum(c for _, c in runs) + lay.dir_pages, len(runs) + 1
        for labels, first, start, length in lay.segments:
            if labels & need:
                lo_page = first + int(start // ps)
                hi_page = first + max(int(math.ceil((start + length) / ps)) - 1, int(start // ps))
                pages.update(range(lo_page, hi_page + 1))
        runs = plan_runs(pages, ps, self.model)
        return sum(c for _, c in runs), len(runs)

    def query_cost(self, d: Design, q: Query) -> float:
        p, s = self.query_io(d, q)
        return self.model.cost(s, p, self.page_size)

    def workload_cost(self, d: Design, w: Workload) -> float:
        key = (d, w)
        if key not in self._cache:
            self.evaluations += 1
            if self.layout(d) is None:
                self._cache[key] = math.inf
            else:
                self._cache[key] = sum(q.freq * self.query_cost(d, q) for q in w.queries)
                self.priced_valid |= d != Design()
        return self._cache[key]


def estimate_workload_cost(candidate: Candidate, workload: Workload, stats: TableStats,
                           model: CostModel | None = None, page_size: int = 8192) -> float:
    return Estimator(stats, model, page_size).workload_cost(candidate.design, workload)


# --------------------------------------------------------------------------
# move set

def co_access_groups(stats: TableStats, workload: Workload) -> tuple:
    """Attribute groups merged greedily by how often attributes are read together."""
    labels = list(stats.labels)
    weight: dict = {}
    for q in workload.queries:
        used = sorted(set(q.fields) | q.predicate.attrs)
        for i, a in enumerate(used):
            for b in used[i + 1:]:
                weight[(a, b)] = weight.get((a, b), 0) + q.freq
    group_of = {a: (a,) for a in labels}
    # merge pairs that are always read together
    usage = {a: sum(q.freq for q in workload.queries if a in set(q.fields) | q.predicate.attrs) for a in labels}
    for (a, b), wgt in sorted(weight.items(), key=lambda kv: (-kv[1], kv[0])):
        if wgt == usage[a] == usage[b] and group_of[a] != group_of[b]:
            merged = tuple(x for x in labels if x in group_of[a] or x in group_of[b])
            for x in merged:
                group_of[x] = merged
    out = []
    for a in labels:
        if group_of[a] not in out:
            out.append(group_of[a])
    return tuple(out)


def _range_attrs(stats: TableStats, workload: Workload) -> list:
    seen = []
    for q in workload.queries:
        for a, lo, hi in q.predicate.ranges:
            if stats.numeric(a) and a not in seen and (lo > -math.inf or hi < math.inf):
                seen.append(a)
    return seen


def _median_extent(stats: TableStats, workload: Workload, a: str) -> float:
    ext = [min(hi, stats.attrs[a].high) - max(lo, stats.attrs[a].low)
           for q in workload.queries for x, lo, hi in q.predicate.ranges if x == a]
    ext = [e for e in ext if e > 0 and math.isfinite(e)]
    if not ext:
        return (stats.attrs[a].high - stats.attrs[a].low) or 1.0
    return statistics.median(ext)


def grid_options(stats: TableStats, workload: Workload) -> list:
    attrs = _range_attrs(stats, workload)
    out = []
    for i, a in enumerate(attrs):
        for b in attrs[i + 1:]:
            ma, mb = _median_extent(stats, workload, a), _median_extent(stats, workload, b)
            for f in (1.0, 0.5, 2.0):
                out.append((a, b, float(f"{ma * f:.6g}"), float(f"{mb * f:.6g}")))
    return out


def neighbors(d: Design, stats: TableStats, workload: Workload) -> list:
    """Single-move neighbors of `d`, each tagged with the move's name."""
    out = []
    groups = co_access_groups(stats, workload)
    dsm = tuple((a,) for a in stats.labels)
    if d.grid is None:
        if d.groups is None:
            if len(groups) > 1:
                out.append(("isolate-columns", Design(groups=groups)))
            if dsm != groups and len(dsm) > 1:
                out.append(("decompose-all", Design(groups=dsm)))
            for a in _range_attrs(stats, workload) + [a for q in workload.queries for a, _ in q.order]:
                if d.sort != a:
                    out.append((f"sort-{a}", Design(sort=a)))
            if d.sort is not None:
                out.append(("unsort", Design()))
                if stats.numeric(d.sort):
                    out.append(("toggle-delta", replace(d, delta=not d.delta)))
        else:
            out.append(("merge-rows", Design()))
        for g in grid_options(stats, workload):
            out.append((f"grid-{g[0]}-{g[1]}", Design(grid=g)))
    else:
        a, b, sa, sb = d.grid
        for g in grid_options(stats, workload):
            if g != d.grid:
                out.append(("restride", replace(d, grid=g)))
        out.append(("toggle-zorder", replace(d, zorder=not d.zorder)))
        out.append(("toggle-delta", replace(d, delta=not d.delta)))
        out.append(("drop-grid", Design()))
    seen = set()
    unique = []
    for move, nd in out:
        if nd not in seen and nd != d:
            seen.add(nd)
            unique.append((move, nd))
    return unique


def enumerate_candidates(stats: TableStats, workload: Workload, budget: int,
                         model: CostModel | None = None, page_size: int = 8192) -> list:
    if budget < 1:
        raise AdvisorError("budget must be at least 1")
    est = Estimator(stats, model, page_size)
    designs = [("row", Design())]
    groups = co_access_groups(stats, workload)
    if len(groups) > 1:
        designs.append(("isolate-columns", Design(groups=groups)))
    dsm = tuple((a,) for a in stats.labels)
    if dsm != groups and len(dsm) > 1:
        designs.append(("decompose-all", Design(groups=dsm)))
    for a in _range_attrs(stats, workload):
        designs.append((f"sort-{a}", Design(sort=a)))
        designs.append(("delta", Design(sort=a, delta=True)))
    for g in grid_options(stats, workload):
        designs.append((f"grid-{g[0]}-{g[1]}", Design(grid=g)))
        designs.append(("zorder", Design(grid=g, zorder=True)))
        designs.append(("delta", Design(grid=g, zorder=True, delta=True)))
    out = []
    for move, d in designs[:budget]:
        out.append(Candidate(d.expression(stats), est.workload_cost(d, workload), (move,), d))
    return out


def _better(c1: float, d1: Design, c2: float, d2: Design, stats) -> bool:
    return (c1, d1.transforms, d1.expression(stats)) < (c2, d2.transforms, d2.expression(stats))


def recommend(stats: TableStats, workload: Workload, budget: int = 200, strategy: str = "greedy",
              seed: int = 0, model: CostModel | None = None, page_size: int = 8192) -> Candidate:
    """Best design found from the row baseline by hill climbing or annealing."""
    if budget < 1:
        raise AdvisorError("budget must be at least 1")
    workload.validate(stats.labels)
    est = Estimator(stats, model, page_size)
    start = Design()
    base_cost = est.workload_cost(start, workload)
    best, best_cost, best_path = start, base_cost, ()
    if not workload.queries:
        return Candidate(start.expression(stats), base_cost, (), start)

    def within_budget() -> bool:
        return est.evaluations < budget

    if strategy == "greedy":
        cur, cur_cost, path = start, base_cost, ()
        while within_budget():
            step = None
            for move, nd in neighbors(cur, stats, workload):
                if not within_budget():
                    break
                c = est.workload_cost(nd, workload)
                if step is None or _better(c, nd, step[1], step[2], stats):
                    step = (move, c, nd)
            if step is None or not _better(step[1], step[2], cur_cost, cur, stats) or step[1] >= cur_cost:
                break
            cur, cur_cost, path = step[2], step[1], path + (step[0],)
        best, best_cost, best_path = cur, cur_cost, path
    elif strategy == "anneal":
        rng = random.Random(seed)
        temp = 0.1 * base_cost
        cur, cur_cost, path = start, base_cost, ()
        steps = 0
        while within_budget() and steps < 10 * budget and temp > 0:
            steps += 1
            options = neighbors(cur, stats, workload)
            if not options:
                break
            move, nd = options[rng.randrange(len(options))]
            c = est.workload_cost(nd, workload)
            if c < cur_cost or (math.isfinite(c) and rng.random() < math.exp(-(c - cur_cost) / temp)):
                cur, cur_cost, path = nd, c, path + (move,)
                if _better(cur_cost, cur, best_cost, best, stats):
                    best, best_cost, best_path = cur, cur_cost, path
            temp *= 0.95
    else:
        raise AdvisorError(f"unknown strategy {strategy!r}")
    if not math.isfinite(best_cost) or (best == start and not est.priced_valid and not within_budget()):
        return Candidate(start.expression(stats), base_cost, (), start,
                         warning="budget exhausted before any valid candidate")
    return Candidate(best.expression(stats), best_cost, best_path, best)


def baseline(stats: TableStats, workload: Workload, model: CostModel | None = None,
             page_size: int = 8192) -> Candidate:
    d = Design()
    return Candidate(d.expression(stats), Estimator(stats, model, page_size).workload_cost(d, workload), (), d)
