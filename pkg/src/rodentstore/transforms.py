"""Pure value-level transforms over nestings.

Every function here takes and returns `Nest` values; the evaluator wires
them to transform names.  Records are `Nest` values carrying labels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from .algebra import LogicalTable, Nest, is_record, scalar_kind


class TransformError(ValueError):
    """A transform was applied to a value of the wrong shape or kind."""


class UnknownAttribute(TransformError, KeyError):
    def __init__(self, attr: str):
        super().__init__(f"unknown attribute {attr}")
        self.attr = attr

    def __str__(self) -> str:
        return self.args[0]


def _is_number(v: Any) -> bool:
    return type(v) in (int, float)


def _field(rec: Any, attr: str) -> Any:
    if not is_record(rec):
        raise TransformError(f"expected a record with attribute {attr}, got {rec!r}")
    i = rec.index_of(attr)
    if i is None:
        raise UnknownAttribute(attr)
    return rec[i]


def _labels_of(rec: Any) -> tuple:
    return rec.labels if is_record(rec) else (None,) * len(rec)


def _require_list(n: Any, what: str) -> Nest:
    if not isinstance(n, tuple):
        raise TransformError(f"{what} expects a nesting, got {n!r}")
    return n if isinstance(n, Nest) else Nest(n)


# --------------------------------------------------------------------------
# baseline layouts

def row_layout(table: LogicalTable) -> Nest:
    return Nest(table.records)


def column_layout(table: LogicalTable) -> Nest:
    cols = [Nest(r[i] for r in table.records) for i in range(len(table.labels))]
    return Nest(cols, table.labels)


# --------------------------------------------------------------------------
# isolation transforms

def project(attrs: Sequence[str], n: Any) -> Nest:
    n = _require_list(n, "project")
    attrs = tuple(attrs)
    return Nest(Nest((_field(r, a) for a in attrs), attrs) for r in n)


def append(elements: Any, n: Any, label: str | None = None) -> Nest:
    elements = _require_list(elements, "append")
    n = _require_list(n, "append")
    if len(elements) != len(n):
        raise TransformError(f"append length mismatch: {len(elements)} elements for {len(n)} tuples")
    out = []
    for e, t in zip(elements, n):
        if not isinstance(t, tuple):
            t = Nest((t,))
        labels = None
        if is_record(t) or label is not None:
            labels = _labels_of(t) + (label,)
        out.append(Nest(tuple(t) + (e,), labels))
    return Nest(out)


def select(pred: Callable[[Any, int], Any], n: Any) -> Nest:
    n = _require_list(n, "select")
    out = []
    for i, e in enumerate(n):
        keep = pred(e, i)
        if type(keep) is not bool:
            raise TransformError(f"select condition returned non-boolean {keep!r}")
        if keep:
            out.append(e)
    return Nest(out)


def partition(key: Callable[[Any, int], Any], n: Any) -> Nest:
    n = _require_list(n, "partition")
    groups: dict[Any, list] = {}
    for i, e in enumerate(n):
        groups.setdefault(key(e, i), []).append(e)
    return Nest(Nest(g) for g in groups.values())


# --------------------------------------------------------------------------
# nesting transforms

def _fold_parts(r: Any, b_attrs: tuple, a_attrs: tuple):
    a = tuple(_field(r, x) for x in a_attrs)
    b = tuple(_field(r, x) for x in b_attrs)
    a_val = a[0] if len(a) == 1 else Nest(a, a_attrs)
    b_val = b[0] if len(b) == 1 else Nest(b, b_attrs)
    return a_val, b_val


def _fold_entry(a_val, bs, b_attrs, a_attrs) -> Nest:
    labels = (a_attrs[0] if len(a_attrs) == 1 else None, b_attrs[0] if len(b_attrs) == 1 else None)
    return Nest((a_val, Nest(bs)), labels)


def _check_fold(b_attrs, a_attrs):
    if not a_attrs or not b_attrs:
        raise TransformError("fold needs nonempty B and A attribute lists")
    if set(a_attrs) & set(b_attrs):
        raise TransformError("fold attribute lists must be disjoint")


def fold(b_attrs: Sequence[str], a_attrs: Sequence[str], n: Any) -> Nest:
    """Nested-loop fold: one entry per distinct A value, first-occurrence order."""
    n = _require_list(n, "fold")
    b_attrs, a_attrs = tuple(b_attrs), tuple(a_attrs)
    _check_fold(b_attrs, a_attrs)
    parts = [_fold_parts(r, b_attrs, a_attrs) for r in n]
    out = []
    done: list[Any] = []
    for i, (a, _) in enumerate(parts):
        if any(_same(a, d) for d in done):
            continue
        done.append(a)
        bs = [b for a2, b in parts[i:] if _same(a2, a)]
        out.append(_fold_entry(a, bs, b_attrs, a_attrs))
    return Nest(out)


def fold_hash(b_attrs: Sequence[str], a_attrs: Sequence[str], n: Any) -> Nest:
    """Single-pass hash fold; output identical to `fold`."""
    n = _require_list(n, "fold")
    b_attrs, a_attrs = tuple(b_attrs), tuple(a_attrs)
    _check_fold(b_attrs, a_attrs)
    groups: dict[Any, tuple] = {}
    for r in n:
        a, b = _fold_parts(r, b_attrs, a_attrs)
        k = _hash_key(a)
        if k not in groups:
            groups[k] = (a, [])
        groups[k][1].append(b)
    return Nest(_fold_entry(a, bs, b_attrs, a_attrs) for a, bs in groups.values())


def _hash_key(v: Any) -> Any:
    # floats compare bitwise so that -0.0 and 0.0 stay distinct keys
    if isinstance(v, tuple):
        return tuple(_hash_key(x) for x in v)
    if type(v) is float:
        return ("f", v.hex())
    return (type(v).__name__, v)


def _same(x: Any, y: Any) -> bool:
    return _hash_key(x) == _hash_key(y)


def _splice(v: Any, label: str | None) -> tuple[tuple, tuple]:
    if is_record(v):
        return tuple(v), v.labels
    return (v,), (label,)


def unfold(n: Any) -> Nest:
    n = _require_list(n, "unfold")
    out = []
    for entry in n:
        if not (isinstance(entry, tuple) and len(entry) == 2 and isinstance(entry[1], tuple)):
            raise TransformError(f"unfold expects [a, list] entries, got {entry!r}")
        entry_labels = _labels_of(entry)
        a_vals, a_labels = _splice(entry[0], entry_labels[0])
        for b in entry[1]:
            b_vals, b_labels = _splice(b, entry_labels[1])
            labels = a_labels + b_labels
            out.append(Nest(a_vals + b_vals, labels if any(x is not None for x in labels) else None))
    return Nest(out)


def prejoin(attr: str, n1: Any, n2: Any) -> Nest:
    n1 = _require_list(n1, "prejoin")
    n2 = _require_list(n2, "prejoin")
    keys2 = [_field(r2, attr) for r2 in n2]
    out = []
    for r1 in n1:
        k = _field(r1, attr)
        for r2, k2 in zip(n2, keys2):
            if _same(k, k2):
                out.append(Nest((r1, r2)))
    return Nest(out)


# --------------------------------------------------------------------------
# compression

def _numeric_kind(values: Sequence[Any]) -> type | None:
    if not isinstance(values, (tuple, list)):
        raise TransformError(f"delta needs a nesting, got {values!r}")
    kinds = set()
    for v in values:
        if not _is_number(v):
            raise TransformError(f"delta needs numbers, got {v!r}")
        kinds.add(type(v))
    if len(kinds) > 1:
        raise TransformError("delta over mixed int and float values")
    return kinds.pop() if kinds else None


def delta(n: Sequence[Any]) -> Nest:
    _numeric_kind(n)
    out = []
    prev = 0
    for v in n:
        out.append(v - prev)
        prev = v
    return Nest(out)


def undelta(n: Sequence[Any]) -> Nest:
    _numeric_kind(n)
    out = []
    acc = 0
    for d in n:
        acc = acc + d
        out.append(acc)
    return Nest(out)


def _map_record_lists(n: Any, fn: Callable[[Nest], Nest]) -> Any:
    # apply `fn` to every list whose elements are records
    if not isinstance(n, tuple) or is_record(n):
        return n
    if n and all(is_record(e) for e in n):
        return fn(n)
    return Nest((_map_record_lists(e, fn) for e in n), n.labels if isinstance(n, Nest) else None)


def _columnwise(attrs: Sequence[str], n: Any, op: Callable) -> Any:
    attrs = tuple(attrs)

    def per_list(records: Nest) -> Nest:
        labels = records[0].labels
        cols = {}
        for a in attrs:
            cols[a] = op([_field(r, a) for r in records])
        idx = {a: labels.index(a) for a in attrs}
        out = []
        for k, r in enumerate(records):
            vals = list(r)
            for a in attrs:
                vals[idx[a]] = cols[a][k]
            out.append(Nest(vals, r.labels))
        return Nest(out)

    if isinstance(n, tuple) and not is_record(n) and all(not isinstance(e, tuple) for e in n):
        if attrs:
            raise TransformError("delta attributes given for a list of scalars")
        return op(n)
    return _map_record_lists(n, per_list)


def delta_columns(attrs: Sequence[str], n: Any) -> Any:
    """Delta-encode the named attributes within every innermost record list."""
    return _columnwise(attrs, n, delta)


def undelta_columns(attrs: Sequence[str], n: Any) -> Any:
    return _columnwise(attrs, n, undelta)


# --------------------------------------------------------------------------
# z-order

def bits(v: int) -> tuple[int, ...]:
    if type(v) is not int or v < 0:
        raise TransformError(f"bin expects a nonnegative integer, got {v!r}")
    return tuple(int(c) for c in format(v, "b"))


def interleave(*seqs: Sequence[int]) -> int:
    """Interleave bit sequences (most significant first), left-padded to a
    common width; the first sequence supplies the higher bit of each group."""
    for s in seqs:
        if not isinstance(s, tuple) or any(b not in (0, 1) or type(b) is not int for b in s):
            raise TransformError(f"interleave expects bit sequences, got {s!r}")
    width = max((len(s) for s in seqs), default=0)
    padded = [(0,) * (width - len(s)) + tuple(s) for s in seqs]
    code = 0
    for i in range(width):
        for s in padded:
            code = (code << 1) | s[i]
    return code


def morton_code(*coords: int) -> int:
    return interleave(*(bits(c) for c in coords))


def zorder(n: Any) -> Nest:
    n = _require_list(n, "zorder")
    keyed = []
    for i, row in enumerate(n):
        if not isinstance(row, tuple) or is_record(row):
            raise TransformError("zorder expects a two-level nesting (rows of cells)")
        for j, cell in enumerate(row):
            keyed.append((morton_code(i, j), cell))
    keyed.sort(key=lambda kv: kv[0])
    return Nest(c for _, c in keyed)


def zorder_positions(shape_rows: Sequence[int]) -> list[tuple[int, int]]:
    """(row, col) pairs of a two-level nesting in Morton order."""
    pairs = [(i, j) for i, w in enumerate(shape_rows) for j in range(w)]
    pairs.sort(key=lambda p: morton_code(*p))
    return pairs


def transpose(n: Any) -> Nest:
    n = _require_list(n, "transpose")
    if not n:
        return Nest()
    widths = set()
    for row in n:
        if not isinstance(row, tuple):
            raise TransformError("transpose expects a nesting of nestings")
        widths.add(len(row))
    if len(widths) != 1:
        raise TransformError("transpose of a ragged nesting")
    (w,) = widths
    return Nest(Nest(row[j] for row in n) for j in range(w))


# --------------------------------------------------------------------------
# grid

@dataclass(frozen=True)
class GridDim:
    attr: str
    stride: float = 1
    origin: float | None = None


@dataclass
class Cell:
    index: tuple       # absolute cell index per dimension
    position: tuple    # position within the grid nesting
    low: tuple         # min coordinate per gridded attribute
    high: tuple        # max coordinate per gridded attribute
    count: int
    byte_start: int = 0   # offset of the cell within the cells segment payload
    byte_len: int = 0


@dataclass
class CellDirectory:
    attrs: tuple
    strides: tuple
    origins: tuple
    shape: tuple          # cells per dimension
    cells: list           # nonempty cells in stored order

    def to_json(self) -> dict:
        return {"attrs": list(self.attrs), "strides": list(self.strides),
                "origins": list(self.origins), "shape": list(self.shape),
                "cells": [[list(c.index), list(c.position), list(c.low), list(c.high),
                           c.count, c.byte_start, c.byte_len] for c in self.cells]}

    @classmethod
    def from_json(cls, obj: dict) -> "CellDirectory":
        cells = [Cell(tuple(i), tuple(p), tuple(lo), tuple(hi), n, bs, bl)
                 for i, p, lo, hi, n, bs, bl in obj["cells"]]
        return cls(tuple(obj["attrs"]), tuple(obj["strides"]), tuple(obj["origins"]),
                   tuple(obj["shape"]), cells)


def records_of(n: Any) -> list:
    """All records inside `n`, descending through unlabeled nestings."""
    out: list = []

    def walk(v):
        if is_record(v):
            out.append(v)
        elif isinstance(v, tuple):
            for e in v:
                walk(e)
        else:
            raise TransformError(f"expected records, found scalar {v!r}")

    walk(n)
    return out


def grid(dims: Sequence[GridDim], n: Any) -> tuple[Nest, CellDirectory]:
    """Repartition records into a row-major nesting of cells covering the
    data's bounding box; returns the nesting and its cell directory."""
    dims = tuple(dims)
    if not dims:
        raise TransformError("grid needs at least one dimension")
    for d in dims:
        if not _is_number(d.stride) or not d.stride > 0 or not math.isfinite(d.stride):
            raise TransformError(f"grid stride for {d.attr} must be positive, got {d.stride!r}")
    recs = records_of(_require_list(n, "grid"))
    coords = []
    for r in recs:
        c = tuple(_field(r, d.attr) for d in dims)
        for d, v in zip(dims, c):
            if not _is_number(v):
                raise TransformError(f"grid attribute {d.attr} is not numeric: {v!r}")
        coords.append(c)
    origins = []
    for k, d in enumerate(dims):
        if d.origin is not None:
            origins.append(d.origin)
        else:
            origins.append(min(c[k] for c in coords) if coords else 0)
    strides = tuple(d.stride for d in dims)
    attrs = tuple(d.attr for d in dims)
    if not recs:
        return Nest(), CellDirectory(attrs, strides, tuple(origins), (0,) * len(dims), [])
    idx = [tuple(math.floor((v - o) / s) for v, o, s in zip(c, origins, strides)) for c in coords]
    lo = [min(i[k] for i in idx) for k in range(len(dims))]
    hi = [max(i[k] for i in idx) for k in range(len(dims))]
    shape = tuple(h - l + 1 for l, h in zip(lo, hi))
    buckets: dict[tuple, list] = {}
    for r, c, i in zip(recs, coords, idx):
        pos = tuple(a - b for a, b in zip(i, lo))
        buckets.setdefault(pos, []).append((r, c))

    def build(prefix: tuple) -> Nest:
        level = len(prefix)
        if level == len(dims):
            return Nest(r for r, _ in buckets.get(prefix, ()))
        return Nest(build(prefix + (p,)) for p in range(shape[level]))

    nest = build(())
    cells = []
    for pos in sorted(buckets):
        members = buckets[pos]
        cells.append(Cell(
            index=tuple(p + l for p, l in zip(pos, lo)), position=pos,
            low=tuple(min(c[k] for _, c in members) for k in range(len(dims))),
            high=tuple(max(c[k] for _, c in members) for k in range(len(dims))),
            count=len(members)))
    return nest, CellDirectory(attrs, strides, tuple(origins), shape, cells)
