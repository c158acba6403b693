"""Table access: scans with projection, predicate and order, positional
access with cursors, and IO cost estimates for both."""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from operator import itemgetter
from typing import Any, Iterator, Sequence

from .encoding import decode_varint
from .storage import Database, Segment, StoredTable, decode_directory, decode_generic, decode_skeleton, unnest
from .transforms import CellDirectory

_U64 = struct.Struct("<Q")


class AccessError(Exception):
    pass


class _EndOfTable:
    def __repr__(self) -> str:
        return "END_OF_TABLE"

    def __bool__(self) -> bool:
        return False


END_OF_TABLE = _EndOfTable()


# --------------------------------------------------------------------------
# predicates and costs

@dataclass(frozen=True)
class Predicate:
    """Conjunction of half-open ranges [low, high) and equalities."""
    ranges: tuple = ()   # (attr, low, high)
    equals: tuple = ()   # (attr, value)

    def __post_init__(self):
        object.__setattr__(self, "ranges", tuple(tuple(r) for r in self.ranges))
        object.__setattr__(self, "equals", tuple(tuple(e) for e in self.equals))
        for attr, low, high in self.ranges:
            if not low < high:
                raise ValueError(f"empty range for {attr}: low {low!r} must be below high {high!r}")

    @property
    def attrs(self) -> set:
        return {r[0] for r in self.ranges} | {e[0] for e in self.equals}

    def matches(self, rec: dict) -> bool:
        for attr, low, high in self.ranges:
            v = rec[attr]
            if not low <= v < high:
                return False
        for attr, value in self.equals:
            if rec[attr] != value:
                return False
        return True

    def filter(self, rows: list, index: dict) -> list:
        """Rows (tuples laid out per `index`) that satisfy the predicate."""
        ns: dict = {}
        conds = []
        for k, (attr, low, high) in enumerate(self.ranges):
            ns[f"l{k}"], ns[f"h{k}"] = low, high
            conds.append(f"l{k} <= r[{index[attr]}] < h{k}")
        for k, (attr, value) in enumerate(self.equals):
            ns[f"e{k}"] = value
            conds.append(f"r[{index[attr]}] == e{k}")
        if not conds:
            return list(rows)
        return eval("lambda rows: [r for r in rows if " + " and ".join(conds) + "]", ns)(rows)

    def box(self, attr: str) -> tuple[float, float, bool]:
        """(low, high, high_inclusive) bounding the values `attr` may take."""
        low, high, inclusive = -math.inf, math.inf, False
        for a, lo, hi in self.ranges:
            if a == attr:
                low, high = max(low, lo), min(high, hi)
        for a, v in self.equals:
            if a == attr and type(v) in (int, float):
                if v >= low and (v < high):
                    low, high, inclusive = v, v, True
                else:
                    return 1.0, 0.0, False
        return low, high, inclusive

    @classmethod
    def parse(cls, text: str) -> "Predicate":
        """Parse ``attr>=v&attr<v&attr=v`` conjunctions."""
        lows: dict = {}
        highs: dict = {}
        equals = []
        for part in text.split("&"):
            if not part.strip():
                continue
            m = re.fullmatch(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*(>=|<|=)\s*(.*?)\s*", part)
            if m is None:
                raise ValueError(f"bad predicate term {part!r}; expected attr>=v, attr<v or attr=v")
            attr, op, raw = m.groups()
            v = _literal(raw)
            if op == ">=":
                lows[attr] = max(lows.get(attr, v), v)
            elif op == "<":
                highs[attr] = min(highs.get(attr, v), v)
            else:
                equals.append((attr, v))
        ranges = []
        for attr in list(dict.fromkeys(list(lows) + list(highs))):
            ranges.append((attr, lows.get(attr, -math.inf), highs.get(attr, math.inf)))
        return cls(tuple(ranges), tuple(equals))


def _literal(raw: str) -> Any:
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


@dataclass(frozen=True)
class CostModel:
    seek_ms: float = 10.0
    transfer_ms_per_byte: float = 1e-5

    def __post_init__(self):
        if self.seek_ms < 0 or self.transfer_ms_per_byte < 0:
            raise ValueError("cost model constants must be nonnegative")

    def cost(self, seeks: int, pages: int, page_size: int) -> float:
        return seeks * self.seek_ms + pages * page_size * self.transfer_ms_per_byte


def plan_runs(pages: set | Sequence[int], page_size: int, model: CostModel) -> list[tuple[int, int]]:
    """Contiguous (first, count) runs covering `pages`.

    A gap between two runs is read through when transferring it costs less
    than a seek, so the plan cost never decreases as the page set grows.
    """
    ordered = sorted(set(pages))
    runs: list[list[int]] = []
    gap_limit = model.seek_ms / (page_size * model.transfer_ms_per_byte) if model.transfer_ms_per_byte else math.inf
    for p in ordered:
        if runs:
            first, count = runs[-1]
            gap = p - (first + count)
            if gap == 0 or gap < gap_limit:
                runs[-1][1] = p - first + 1
                continue
        runs.append([p, 1])
    return [(a, b) for a, b in runs]


@dataclass(frozen=True)
class IOEstimate:
    pages: int
    seeks: int
    ms: float


def _runs_estimate(runs, page_size, model) -> IOEstimate:
    pages = sum(c for _, c in runs)
    return IOEstimate(pages, len(runs), model.cost(len(runs), pages, page_size))


# --------------------------------------------------------------------------
# reading segments

def _page_span(seg: Segment, start: int, end: int, page_size: int) -> range:
    if end <= start:
        return range(0)
    first = seg.entry.first_page
    return range(first + start // page_size, first + (end - 1) // page_size + 1)


class _Fetcher:
    """Reads byte ranges of segments through a page plan, caching pages."""

    def __init__(self, db: Database, counted: bool = True):
        self.db = db
        self.counted = counted
        self.pages: dict[int, bytes] = {}

    def load(self, pages) -> None:
        missing = sorted(set(pages) - set(self.pages))
        for p in missing:
            self.pages[p] = self.db.pf.read_page(p) if self.counted else self.db.pf.peek_page(p)

    def load_runs(self, runs) -> None:
        for first, count in runs:
            for p in range(first, first + count):
                if p not in self.pages:
                    self.pages[p] = self.db.pf.read_page(p) if self.counted else self.db.pf.peek_page(p)

    def bytes(self, seg: Segment, start: int, end: int) -> bytes:
        ps = self.db.page_size
        span = _page_span(seg, start, end, ps)
        self.load(span)
        buf = b"".join(self.pages[p] for p in span)
        off = start - (span.start - seg.entry.first_page) * ps if len(span) else 0
        return buf[off:off + (end - start)]


def directory(db: Database, table: StoredTable, counted: bool = False) -> CellDirectory | None:
    seg = table.directory
    if seg is None:
        return None
    cached = db.directory_cache.get(seg.id)
    if cached is None:
        f = _Fetcher(db, counted)
        cached = decode_directory(f.bytes(seg, 0, seg.byte_len))
        db.directory_cache[seg.id] = cached
    return cached


def preload(db: Database, name: str) -> None:
    """Bring the table's cell directory into memory without counted IO."""
    directory(db, _table(db, name), counted=False)


def _table(db: Database, name: str) -> StoredTable:
    try:
        return db.tables[name]
    except KeyError:
        raise AccessError(f"no table named {name}") from None


def _cell_overlaps(cell, d: CellDirectory, pred: Predicate) -> bool:
    for k, attr in enumerate(d.attrs):
        low, high, inclusive = pred.box(attr)
        if inclusive:
            if not (cell.low[k] <= low <= cell.high[k]):
                return False
        elif not (cell.low[k] < high and cell.high[k] >= low):
            return False
    return True


@dataclass
class _ScanPlan:
    table: StoredTable
    segments: list          # segments to decode, in default-order priority
    ranges: dict            # seg id -> list of (start, end)
    cells: list | None      # selected cells for a cells segment
    use_perm: bool
    runs: list
    directory_pages: int


def _needed_segments(t: StoredTable, labels: set) -> list:
    segs = [s for s in t.segments if s.role == "generic" or labels & set(s.labels)]
    return segs or t.segments[:1]


def _plan_scan(db: Database, t: StoredTable, labels: set, pred: Predicate | None,
               model: CostModel, dir_counted: bool = False) -> _ScanPlan:
    segs = _needed_segments(t, labels)
    ranges: dict[int, list] = {}
    cells = None
    for s in segs:
        if s.role == "cells":
            d = directory(db, t, counted=dir_counted)
            cells = [c for c in d.cells if pred is None or _cell_overlaps(c, d, pred)]
            ranges[s.id] = [(c.byte_start, c.byte_start + c.byte_len) for c in cells]
        elif s.role == "records" and s.delta:
            ranges[s.id] = [(0, s.struct_len), (s.data_start, s.byte_len)]
        elif s.role == "records":
            ranges[s.id] = [(s.data_start, s.byte_len)]
        else:
            ranges[s.id] = [(0, s.byte_len)]
    use_perm = t.permutation is not None and len(segs) > 1
    pages: set[int] = set()
    for s in segs:
        for a, b in ranges[s.id]:
            pages.update(_page_span(s, a, b, db.page_size))
    if use_perm:
        n = t.record_count
        for s in segs:
            k = t.segments.index(s)
            pages.update(_page_span(t.permutation, 16 * n * k, 16 * n * k + 8 * n, db.page_size))
    runs = plan_runs(pages, db.page_size, model)
    dir_pages = t.directory.entry.span if (t.directory is not None and cells is not None) else 0
    return _ScanPlan(t, segs, ranges, cells, use_perm, runs, dir_pages)


def _decode_segment(f: _Fetcher, s: Segment, plan: _ScanPlan) -> tuple[tuple, list]:
    """(labels, rows) of one segment; rows are tuples in label order."""
    if s.role == "generic":
        labels = plan.table.labels
        recs = unnest(decode_generic(f.bytes(s, 0, s.byte_len), s.struct_len, s.label_dict))
        return labels, [tuple(r[a] for a in labels) for r in recs]
    codec = s.codec
    rows: list = []
    if s.role == "cells":
        for c in plan.cells:
            buf = f.bytes(s, c.byte_start, c.byte_start + c.byte_len)
            recs, _ = codec.decode_run(buf, 0, c.count)
            rows.extend(recs)
    elif s.delta:
        runs = decode_skeleton(f.bytes(s, 0, s.struct_len))
        buf = f.bytes(s, s.data_start, s.byte_len)
        pos = 0
        for n in runs:
            recs, pos = codec.decode_run(buf, pos, n)
            rows.extend(recs)
    else:
        buf = f.bytes(s, s.data_start, s.byte_len)
        rows, _ = codec.decode_run(buf, 0, s.count)
    return tuple(s.labels), rows


def _ids(f: _Fetcher, t: StoredTable, s: Segment) -> list[int]:
    n = t.record_count
    k = t.segments.index(s)
    buf = f.bytes(t.permutation, 16 * n * k, 16 * n * k + 8 * n)
    return list(struct.unpack(f"<{n}Q", buf))


def _merge(f: _Fetcher, plan: _ScanPlan) -> tuple[tuple, list]:
    parts = [_decode_segment(f, s, plan) for s in plan.segments]
    if len(parts) == 1:
        return parts[0]
    labels = tuple(a for lab, _ in parts for a in lab)
    if not plan.use_perm:
        if len({len(p) for _, p in parts}) != 1:
            raise AccessError("column segments disagree on record count")
        return labels, [sum(row, ()) for row in zip(*(p for _, p in parts))]
    ids = [_ids(f, plan.table, s) for s in plan.segments]
    by_id = [dict(zip(i, p)) for i, (_, p) in zip(ids, parts)]
    return labels, [sum((m[rid] for m in by_id), ()) for rid in ids[0]]


def _check_fields(t: StoredTable, names) -> None:
    for a in names:
        if a not in t.labels:
            raise AccessError(f"unknown field {a}")


def _normalize_order(order) -> tuple:
    if not order:
        return ()
    if isinstance(order, str):  # "a ASC, b DESC"
        order = [o for o in order.split(",") if o.strip()]
    out = []
    for o in order:
        if isinstance(o, str):
            parts = o.split()
            if not parts or len(parts) > 2:
                raise AccessError(f"bad sort key {o!r}")
            out.append((parts[0], parts[1].upper() if len(parts) > 1 else "ASC"))
        else:
            out.append((o[0], o[1] if len(o) > 1 else "ASC"))
    for _, d in out:
        if d not in ("ASC", "DESC"):
            raise AccessError(f"bad sort direction {d}")
    return tuple(out)


def natively_ordered(t: StoredTable, order) -> bool:
    order = _normalize_order(order)
    if not order:
        return True
    o = t.ordering
    return o.kind == "keys" and not o.within_groups and o.keys[:len(order)] == order


def _sort(rows: list, order: tuple, index: dict) -> list:
    out = list(rows)
    for attr, d in reversed(order):
        out.sort(key=itemgetter(index[attr]), reverse=(d == "DESC"))
    return out


def scan(db: Database, name: str, fields: Sequence[str] | None = None,
         predicate: Predicate | None = None, order=None,
         model: CostModel | None = None) -> Iterator[tuple]:
    """Flat records (tuples in `fields` order) satisfying `predicate`."""
    t = _table(db, name)
    fields = tuple(fields) if fields else t.labels
    order = _normalize_order(order)
    _check_fields(t, fields)
    _check_fields(t, predicate.attrs if predicate else ())
    _check_fields(t, [a for a, _ in order])
    if t.record_count == 0:
        return iter(())
    labels = set(fields) | (predicate.attrs if predicate else set()) | {a for a, _ in order}
    plan = _plan_scan(db, t, labels, predicate, model or CostModel(), dir_counted=True)
    f = _Fetcher(db)
    f.load_runs(plan.runs)
    labels, rows = _merge(f, plan)
    index = {a: i for i, a in reversed(list(enumerate(labels)))}
    if predicate is not None:
        rows = predicate.filter(rows, index)
    if not natively_ordered(t, order):
        rows = _sort(rows, order, index)
    if len(fields) == 1:
        k = index[fields[0]]
        return iter([(r[k],) for r in rows])
    return iter(list(map(itemgetter(*(index[a] for a in fields)), rows)))


def scan_estimate(db: Database, name: str, fields=None, predicate: Predicate | None = None,
                  order=None, model: CostModel | None = None) -> IOEstimate:
    model = model or CostModel()
    t = _table(db, name)
    fields = tuple(fields) if fields else t.labels
    order = _normalize_order(order)
    _check_fields(t, fields)
    _check_fields(t, predicate.attrs if predicate else ())
    if t.record_count == 0:
        return IOEstimate(0, 0, 0.0)
    labels = set(fields) | (predicate.attrs if predicate else set()) | {a for a, _ in order}
    plan = _plan_scan(db, t, labels, predicate, model)
    est = _runs_estimate(plan.runs, db.page_size, model)
    if plan.directory_pages:
        pages = est.pages + plan.directory_pages
        seeks = est.seeks + 1
        est = IOEstimate(pages, seeks, model.cost(seeks, pages, db.page_size))
    return est


def scan_cost(db: Database, name: str, fields=None, predicate: Predicate | None = None,
              order=None, model: CostModel | None = None) -> float:
    """Estimated milliseconds for `scan` with the same arguments."""
    return scan_estimate(db, name, fields, predicate, order, model).ms


# --------------------------------------------------------------------------
# positional access

def _flat_index(t: StoredTable, d: CellDirectory | None, index) -> int:
    if isinstance(index, tuple):
        if d is None:
            if len(index) == 1:
                return _flat_index(t, d, index[0])
            raise AccessError("multidimensional index on a table without a grid")
        if len(index) != len(d.attrs) + 1:
            raise AccessError(f"index needs {len(d.attrs)} cell coordinates and a position")
        pos, k = tuple(index[:-1]), index[-1]
        base = 0
        for c in d.cells:
            if c.position == pos:
                if not 0 <= k < c.count:
                    raise AccessError(f"index {index} out of bounds")
                return base + k
            base += c.count
        raise AccessError(f"index {index} out of bounds (empty cell)")
    if type(index) is not int or not 0 <= index < t.record_count:
        raise AccessError(f"index {index!r} out of bounds for {t.record_count} records")
    return index


def _locate_cell(d: CellDirectory, i: int):
    base = 0
    for c in d.cells:
        if i < base + c.count:
            return c, i - base
        base += c.count
    raise AccessError(f"index {i} out of bounds")


def _record_at(f: _Fetcher, t: StoredTable, s: Segment, rank: int, d: CellDirectory | None) -> dict:
    codec = s.codec
    if s.role == "generic":
        recs = unnest(decode_generic(f.bytes(s, 0, s.byte_len), s.struct_len, s.label_dict))
        return recs[rank]
    if s.role == "cells":
        c, k = _locate_cell(d, rank)
        if s.width is not None:
            start = c.byte_start + k * s.width
            rec, _ = codec.decode_run(f.bytes(s, start, start + s.width), 0, 1)
        else:
            recs, _ = codec.decode_run(f.bytes(s, c.byte_start, c.byte_start + c.byte_len), 0, c.count)
            rec = recs[k:k + 1]
        return dict(zip(s.labels, rec[0]))
    if s.delta:
        runs = decode_skeleton(f.bytes(s, 0, s.struct_len))
        buf = f.bytes(s, s.data_start, s.byte_len)
        pos = 0
        base = 0
        for n in runs:
            if rank < base + n:
                recs, _ = codec.decode_run(buf, pos, rank - base + 1)
                return dict(zip(s.labels, recs[-1]))
            _, pos = codec.decode_run(buf, pos, n)
            base += n
        raise AccessError(f"index {rank} out of bounds")
    if s.width is not None:
        start = s.data_start + rank * s.width
        rec, _ = codec.decode_run(f.bytes(s, start, start + s.width), 0, 1)
        return dict(zip(s.labels, rec[0]))
    off_at = s.struct_len + 8 * rank
    if rank + 1 < s.count:
        a, b = struct.unpack("<QQ", f.bytes(s, off_at, off_at + 16))
    else:
        (a,) = struct.unpack("<Q", f.bytes(s, off_at, off_at + 8))
        b = s.payload_len
    rec, _ = codec.decode_run(f.bytes(s, s.data_start + a, s.data_start + b), 0, 1)
    return dict(zip(s.labels, rec[0]))


def _element(f: _Fetcher, db: Database, t: StoredTable, fields: tuple, i: int) -> tuple:
    d = directory(db, t, counted=f.counted)
    segs = _needed_segments(t, set(fields))
    if t.permutation is not None and len(segs) > 1:
        n = t.record_count
        k0 = t.segments.index(segs[0])
        (rid,) = _U64.unpack(f.bytes(t.permutation, 16 * n * k0 + 8 * i, 16 * n * k0 + 8 * i + 8))
        rec = _record_at(f, t, segs[0], i, d)
        for s in segs[1:]:
            k = t.segments.index(s)
            at = 16 * n * k + 8 * n + 8 * rid
            (rank,) = _U64.unpack(f.bytes(t.permutation, at, at + 8))
            rec.update(_record_at(f, t, s, rank, d))
    else:
        rec = {}
        for s in segs:
            rec.update(_record_at(f, t, s, i, d))
    return tuple(rec[a] for a in fields)


def get_element(db: Database, name: str, index, fields: Sequence[str] | None = None) -> tuple:
    """The record at `index` of the table's default stored order.

    For gridded tables `index` may also be (cell coordinates..., k): the
    k-th record of that cell.
    """
    t = _table(db, name)
    fields = tuple(fields) if fields else t.labels
    _check_fields(t, fields)
    i = _flat_index(t, directory(db, t), index)
    rec = _element(_Fetcher(db), db, t, fields, i)
    db.cursors[name] = i
    return rec


def get_element_estimate(db: Database, name: str, index, fields=None,
                         model: CostModel | None = None) -> IOEstimate:
    model = model or CostModel()
    t = _table(db, name)
    fields = tuple(fields) if fields else t.labels
    _check_fields(t, fields)
    i = _flat_index(t, directory(db, t), index)
    f = _Fetcher(db, counted=False)
    _element(f, db, t, fields, i)
    pages = len(f.pages)
    return IOEstimate(pages, 1, model.cost(1, pages, db.page_size))


def get_element_cost(db: Database, name: str, index, fields=None, model: CostModel | None = None) -> float:
    return get_element_estimate(db, name, index, fields, model).ms


def next_element(db: Database, name: str, order=None, fields: Sequence[str] | None = None):
    """Advance the table's cursor; returns END_OF_TABLE after the last record."""
    t = _table(db, name)
    if name not in db.cursors:
        raise AccessError(f"no open cursor on {name}; call get_element first")
    i = db.cursors[name]
    order = _normalize_order(order)
    if order and not natively_ordered(t, order):
        ranked = _order_permutation(db, t, order)
        r = ranked.index(i) + 1
        if r >= len(ranked):
            return END_OF_TABLE
        nxt = ranked[r]
    else:
        nxt = i + 1
        if nxt >= t.record_count:
            return END_OF_TABLE
    return get_element(db, name, nxt, fields)


def _order_permutation(db: Database, t: StoredTable, order: tuple) -> list[int]:
    cache = db.__dict__.setdefault("_order_cache", {})
    key = (t.name, id(t), order)
    if key not in cache:
        attrs = [a for a, _ in order]
        keyed = list(enumerate(scan(db, t.name, attrs)))
        for k in reversed(range(len(order))):
            keyed.sort(key=lambda p: p[1][k], reverse=order[k][1] == "DESC")
        cache[key] = [i for i, _ in keyed]
    return cache[key]


def order_list(db: Database, name: str) -> list[str]:
    """Orders the stored layout delivers without re-sorting."""
    t = _table(db, name)
    return [o.describe() for o in t.orderings() if o.kind != "custom"]
