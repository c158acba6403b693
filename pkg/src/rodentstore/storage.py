"""Rendering layout expressions into segments of a page file.

A rendered table is a set of segments.  Each data segment is one byte
stream packed densely over consecutive pages:

    [structure region][offsets region][payload]

* ``records`` segments hold flat records; the structure region encodes the
  grouping skeleton above them and the offsets region (one u64 per record,
  only for variable-width records) allows direct offsetting.
* ``cells`` segments hold the records of a grid, cell after cell, in
  row-major or Morton order; a cell directory blob locates each cell.
* ``generic`` segments hold any other nesting as a preorder structure
  stream plus its leaf entries.

Table metadata (schemas, layout text, per-segment region sizes) is a JSON
blob stored as segment 0.  A commit writes new segments into pages the
committed catalog does not reference, then the metadata and catalog, and
finally the header page, so a crash at any point leaves exactly one
complete catalog reachable.
"""
from __future__ import annotations

import json
import os
import struct
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable

from . import transforms as tf
from .algebra import (
    Comprehension, FieldAccess, Generator, GroupBy, HelperCall, Limit, ListExpr, LogicalTable,
    Nest, Nesting, OrderBy, PartitionBy, ScalarType, SchemaError, TableRef, Transform, Var,
    is_record, parse_schema, scalar_kind, schema_to_text, walk,
)
from .encoding import (
    RecordCodec, decode_scalar, decode_varint, encode_scalar, encode_varint, unzigzag, zigzag,
)
from .engine import Env, EvalError, evaluate, grid_dims
from .pagefile import (
    CatalogEntry, Ordering, PageFile, PageFileError, decode_catalog, encode_catalog,
)
from .parser import format_expr, parse
from .physical import flatten

METADATA_ID = 0
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")
_KIND_INDEX = {ScalarType.INT: 0, ScalarType.FLOAT: 1, ScalarType.STR: 2}
_KIND_FROM_INDEX = {v: k for k, v in _KIND_INDEX.items()}


class StorageError(Exception):
    pass


class LayoutError(StorageError):
    """The layout cannot be stored for this table."""


# --------------------------------------------------------------------------
# segment and table metadata

@dataclass
class Segment:
    entry: CatalogEntry
    role: str                  # records | cells | generic | directory | permutation
    labels: tuple = ()
    kinds: tuple = ()          # ScalarType per label
    struct_len: int = 0
    offsets_len: int = 0
    payload_len: int = 0
    width: int | None = None
    count: int = 0             # records stored
    delta: tuple = ()          # delta-encoded labels
    label_dict: tuple = ()     # generic segments: label table

    @property
    def id(self) -> int:
        return self.entry.id

    @property
    def data_start(self) -> int:
        return self.struct_len + self.offsets_len

    @property
    def byte_len(self) -> int:
        return self.struct_len + self.offsets_len + self.payload_len

    @property
    def codec(self) -> RecordCodec:
        return RecordCodec(self.kinds, [self.labels.index(a) for a in self.delta])

    def to_json(self) -> dict:
        return {"role": self.role, "labels": list(self.labels), "kinds": [k.value for k in self.kinds],
                "struct_len": self.struct_len, "offsets_len": self.offsets_len,
                "payload_len": self.payload_len, "width": self.width, "count": self.count,
                "delta": list(self.delta), "label_dict": list(self.label_dict)}

    @classmethod
    def from_json(cls, entry: CatalogEntry, obj: dict) -> "Segment":
        return cls(entry, obj["role"], tuple(obj["labels"]), tuple(ScalarType(k) for k in obj["kinds"]),
                   obj["struct_len"], obj["offsets_len"], obj["payload_len"], obj["width"],
                   obj["count"], tuple(obj["delta"]), tuple(obj["label_dict"]))


@dataclass
class StoredTable:
    name: str
    schema: Nesting
    layout: str
    record_count: int
    segments: list                      # data segments, in default order
    ordering: Ordering = field(default_factory=Ordering)
    directory: Segment | None = None
    permutation: Segment | None = None
    grid_attrs: tuple = ()

    @property
    def labels(self) -> tuple:
        return tuple(c.label for c in self.schema.children)

    def all_segments(self) -> list:
        extra = [s for s in (self.directory, self.permutation) if s is not None]
        return list(self.segments) + extra

    def bytes_on_disk(self) -> int:
        return sum(s.byte_len for s in self.all_segments())

    def orderings(self) -> list:
        seen = []
        for s in self.segments:
            if s.entry.ordering not in seen:
                seen.append(s.entry.ordering)
        return seen

    def to_json(self) -> dict:
        return {"schema": schema_to_text(self.schema), "layout": self.layout,
                "record_count": self.record_count, "segments": [s.id for s in self.segments],
                "directory": self.directory.id if self.directory else None,
                "permutation": self.permutation.id if self.permutation else None,
                "ordering": {"kind": self.ordering.kind, "keys": [list(k) for k in self.ordering.keys],
                             "within_groups": self.ordering.within_groups},
                "grid_attrs": list(self.grid_attrs)}


def _ordering_from_json(obj: dict) -> Ordering:
    return Ordering(obj["kind"], tuple(tuple(k) for k in obj["keys"]), obj["within_groups"])


# --------------------------------------------------------------------------
# render plans (pure: computed fully before anything is written)

@dataclass
class SegmentPlan:
    kind: str
    role: str
    data: bytes
    entries: int
    ordering: Ordering = field(default_factory=Ordering)
    encoding: str = "plain"
    info: dict = field(default_factory=dict)   # Segment fields beyond the entry


@dataclass
class RenderPlan:
    segments: list
    ordering: Ordering
    record_count: int
    directory: SegmentPlan | None = None
    permutation: SegmentPlan | None = None
    grid_attrs: tuple = ()


def default_layout(table_name: str) -> str:
    return table_name


def infer_ordering(e: Any) -> Ordering:
    """Ordering descriptor of the stored elements of layout `e`."""
    if isinstance(e, TableRef):
        return Ordering("insertion")
    if isinstance(e, Transform):
        if e.name in ("select", "project", "delta") and len(e.inputs) == 1:
            return infer_ordering(e.inputs[0])
        if e.name == "grid":
            return Ordering("rowmajor", tuple((d.attr, "ASC") for d in grid_dims(e)))
        if e.name == "zorder" and len(e.inputs) == 1 and _is_grid(e.inputs[0]):
            return Ordering("morton", tuple((d.attr, "ASC") for d in grid_dims(e.inputs[0])))
        return Ordering("custom")
    if isinstance(e, Comprehension):
        gens = [q for q in e.qualifiers if isinstance(q, Generator)]
        if len(gens) != 1:
            return Ordering("custom")
        var = gens[0].var
        order = infer_ordering(gens[0].source)
        seen_gen = False
        for q in e.qualifiers:
            if isinstance(q, Generator):
                seen_gen = True
            elif not seen_gen:
                continue
            elif isinstance(q, OrderBy):
                keys = []
                for k, d in q.keys:
                    if isinstance(k, FieldAccess) and isinstance(k.base, Var) and k.base.name == var:
                        keys.append((k.label, d))
                    else:
                        return Ordering("custom")
                order = Ordering("keys", tuple(keys))
            elif isinstance(q, (GroupBy, PartitionBy)):
                order = replace(order, within_groups=True)
        return order
    return Ordering("custom")


def _is_grid(e: Any) -> bool:
    return isinstance(e, Transform) and e.name == "grid" and len(e.inputs) == 1


def _uniform_records(leaves: list) -> tuple[tuple, tuple] | None:
    """(labels, kinds) when every leaf is a flat, fully labeled record of one shape."""
    labels = None
    kinds: list = []
    for r in leaves:
        if not is_record(r) or any(lab is None for lab in r.labels) or len(set(r.labels)) != len(r.labels):
            return None
        if labels is None:
            labels = r.labels
            kinds = [scalar_kind(v) for v in r]
            if any(k is None for k in kinds):
                return None
        elif r.labels != labels:
            return None
        else:
            for i, v in enumerate(r):
                if scalar_kind(v) is not kinds[i]:
                    return None
    if labels is None:
        return None
    return labels, tuple(kinds)


def _skeleton(v: Any, out: bytearray, leaves: list) -> bool:
    # lists of records become one "run" code; lists of lists recurse
    if not isinstance(v, tuple) or is_record(v):
        return False
    if v and all(is_record(c) for c in v):
        out += encode_varint((len(v) << 1) | 1)
        leaves.extend(v)
        return True
    if any(is_record(c) or not isinstance(c, tuple) for c in v):
        return False
    out += encode_varint(len(v) << 1)
    return all(_skeleton(c, out, leaves) for c in v)


def decode_skeleton(buf: bytes, count_hint: int | None = None) -> list[int]:
    """Lengths of the record runs described by a skeleton region."""
    runs: list[int] = []
    pos = 0
    pending = 1
    while pending:
        code, pos = decode_varint(buf, pos)
        pending -= 1
        if code & 1:
            runs.append(code >> 1)
        else:
            pending += code >> 1
    return runs


def _records_segment(value: Any, delta: tuple, fallback_labels: tuple, fallback_kinds: tuple,
                     kind: str, ordering: Ordering) -> SegmentPlan | None:
    skel = bytearray()
    leaves: list = []
    if not _skeleton(value, skel, leaves):
        return None
    shape = _uniform_records(leaves)
    if shape is None:
        if leaves:
            return None
        shape = (fallback_labels, fallback_kinds)
    labels, kinds = shape
    for a in delta:
        if a not in labels:
            raise LayoutError(f"delta attribute {a} is not stored by this layout")
    codec = RecordCodec(kinds, [labels.index(a) for a in delta])
    runs = decode_skeleton(bytes(skel))
    payload = bytearray()
    offsets = bytearray()
    k = 0
    for n in runs:
        run = leaves[k:k + n]
        k += n
        if codec.width is None and not delta:
            for r in run:
                offsets += _U64.pack(len(payload))
                payload += codec.encode_run([r])
        else:
            payload += codec.encode_run(run)
    info = dict(role="records", labels=labels, kinds=kinds, struct_len=len(skel),
                offsets_len=len(offsets), payload_len=len(payload), width=codec.width,
                count=len(leaves), delta=tuple(delta))
    return SegmentPlan(kind, "records", bytes(skel) + bytes(offsets) + bytes(payload), len(leaves),
                       ordering, "delta-fixedpoint" if delta else "plain", info)


def _generic_segment(value: Any, ordering: Ordering) -> SegmentPlan:
    rep = flatten(value)
    label_ids: dict[str, int] = {}
    structure = bytearray()
    payload = bytearray()
    entries = iter(rep.entries)
    for node in rep.structure:
        if node.leaf:
            v = next(entries)
            kind = scalar_kind(v)
            if kind is None:
                raise LayoutError(f"cannot store value {v!r}")
            structure += encode_varint(_KIND_INDEX[kind] << 2)
            payload += encode_scalar(v)
        elif node.labels is None:
            structure += encode_varint((node.child_count << 2) | 1)
        else:
            structure += encode_varint((node.child_count << 2) | 2)
            for lab in node.labels:
                if lab is None:
                    structure += encode_varint(0)
                else:
                    structure += encode_varint(label_ids.setdefault(lab, len(label_ids)) + 1)
    records = unnest(value)
    info = dict(role="generic", struct_len=len(structure), payload_len=len(payload),
                count=len(records), label_dict=tuple(label_ids))
    return SegmentPlan("rows", "generic", bytes(structure) + bytes(payload), len(records), ordering,
                       "plain", info)


def decode_generic(buf: bytes, struct_len: int, label_dict: tuple) -> Any:
    pos = 0
    ppos = struct_len

    def build():
        nonlocal pos, ppos
        code, pos = decode_varint(buf, pos)
        tag = code & 3
        if tag == 0:
            v, ppos = decode_scalar(buf, ppos, _KIND_FROM_INDEX[code >> 2])
            return v
        n = code >> 2
        labels = None
        if tag == 2:
            labels = []
            for _ in range(n):
                lid, pos = decode_varint(buf, pos)
                labels.append(label_dict[lid - 1] if lid else None)
        kids = [build() for _ in range(n)]
        return Nest(kids, labels)

    return build()


def unnest(v: Any, label: str | None = None) -> list[dict]:
    """Flatten a stored nesting into flat records, merging each nested value
    with the scalar fields of its parent record."""
    if not isinstance(v, tuple):
        return [{label or "value": v}]
    if not is_record(v):
        out: list[dict] = []
        for c in v:
            out.extend(unnest(c, label))
        return out
    partial: list[dict] = [{}]
    for i, (lab, c) in enumerate(zip(v.labels, v)):
        if isinstance(c, tuple):
            sub = unnest(c, lab)
        else:
            sub = [{lab if lab is not None else f"_{i}": c}]
        partial = [{**sub_r, **p} for p in partial for sub_r in sub]
    return partial


def _encode_directory(d: tf.CellDirectory) -> bytes:
    out = bytearray(encode_varint(len(d.attrs)))
    for a, s, o, n in zip(d.attrs, d.strides, d.origins, d.shape):
        raw = a.encode("utf-8")
        out += encode_varint(len(raw)) + raw + _F64.pack(float(s)) + _F64.pack(float(o)) + encode_varint(n)
    out += encode_varint(len(d.cells))
    for c in d.cells:
        for i in c.index:
            out += encode_varint(zigzag(i))
        for p in c.position:
            out += encode_varint(p)
        for x in c.low + c.high:
            out += _F64.pack(float(x))
        out += encode_varint(c.count) + encode_varint(c.byte_start) + encode_varint(c.byte_len)
    return bytes(out)


def decode_directory(buf: bytes) -> tf.CellDirectory:
    nd, pos = decode_varint(buf, 0)
    attrs, strides, origins, shape = [], [], [], []
    for _ in range(nd):
        n, pos = decode_varint(buf, pos)
        attrs.append(bytes(buf[pos:pos + n]).decode("utf-8"))
        pos += n
        strides.append(_F64.unpack_from(buf, pos)[0])
        origins.append(_F64.unpack_from(buf, pos + 8)[0])
        n, pos = decode_varint(buf, pos + 16)
        shape.append(n)
    ncells, pos = decode_varint(buf, pos)
    cells = []
    for _ in range(ncells):
        index, position = [], []
        for _ in range(nd):
            z, pos = decode_varint(buf, pos)
            index.append(unzigzag(z))
        for _ in range(nd):
            p, pos = decode_varint(buf, pos)
            position.append(p)
        bounds = struct.unpack_from(f"<{2 * nd}d", buf, pos)
        pos += 16 * nd
        count, pos = decode_varint(buf, pos)
        start, pos = decode_varint(buf, pos)
        length, pos = decode_varint(buf, pos)
        cells.append(tf.Cell(tuple(index), tuple(position), tuple(bounds[:nd]), tuple(bounds[nd:]),
                             count, start, length))
    return tf.CellDirectory(tuple(attrs), tuple(strides), tuple(origins), tuple(shape), cells)


def _cells_plan(table: LogicalTable, env: Env, e: Transform, delta: tuple) -> RenderPlan | None:
    morton = e.name == "zorder"
    grid_node = e.inputs[0] if morton else e
    dims = grid_dims(grid_node)
    if morton and len(dims) != 2:
        return None
    source = evaluate(grid_node.inputs[0], env)
    try:
        nest, directory = tf.grid(dims, source)
    except tf.UnknownAttribute as ex:
        raise EvalError(f"unknown label {ex.attr}", grid_node.span) from None
    except tf.TransformError as ex:
        raise EvalError(f"grid: {ex}", grid_node.span) from None
    cells = list(directory.cells)
    if morton:
        cells.sort(key=lambda c: tf.morton_code(*c.position))

    def members(c):
        v = nest
        for p in c.position:
            v = v[p]
        return list(v)

    leaves = [r for c in cells for r in members(c)]
    shape = _uniform_records(leaves)
    if shape is None:
        if leaves:
            return None
        shape = (table.labels, tuple(table.column_type(a) for a in table.labels))
    labels, kinds = shape
    for a in delta:
        if a not in labels:
            raise LayoutError(f"delta attribute {a} is not stored by this layout")
    codec = RecordCodec(kinds, [labels.index(a) for a in delta])
    payload = bytearray()
    for c in cells:
        run = codec.encode_run(members(c))
        c.byte_start = len(payload)
        c.byte_len = len(run)
        payload += run
    directory.cells = cells
    ordering = infer_ordering(e)
    seg = SegmentPlan("cells", "cells", bytes(payload), len(leaves), ordering,
                      "delta-fixedpoint" if delta else "plain",
                      dict(role="cells", labels=labels, kinds=kinds, payload_len=len(payload),
                           width=codec.width, count=len(leaves), delta=tuple(delta)))
    dblob = _encode_directory(directory)
    dplan = SegmentPlan("blob", "directory", dblob, len(cells), Ordering("custom"), "plain",
                        dict(role="directory", payload_len=len(dblob), count=len(cells)))
    return RenderPlan([seg], ordering, len(leaves), directory=dplan, grid_attrs=tuple(d.attr for d in dims))


def _column_generator(item: Comprehension, table_name: str) -> str | None:
    for q in item.qualifiers:
        if isinstance(q, Generator) and isinstance(q.source, TableRef) and q.source.name == table_name:
            return q.var
    return None


def _columns_plan(table: LogicalTable, env: Env, e: ListExpr, delta: tuple) -> RenderPlan | None:
    n = len(table.records)
    segs, id_lists = [], []
    for item in e.items:
        var = _column_generator(item, table.name)
        if var is None:
            return None
        value = evaluate(item, env)
        head = item.head
        if isinstance(head, FieldAccess):
            value = _wrap_scalars(value, head.label)
            if value is None:
                return None
        ids_value = evaluate(replace(item, head=HelperCall("pos", (Var(var),))), env)
        ids = [x for x in _leaf_scalars(ids_value)]
        if sorted(ids) != list(range(n)):
            return None
        seg_delta = tuple(a for a in delta if a in _labels_in(value))
        plan = _records_segment(value, seg_delta, (), (), "column", infer_ordering(item))
        if plan is None:
            return None
        segs.append(plan)
        id_lists.append(ids)
    stored = [a for s in segs for a in s.info["labels"]]
    for a in delta:
        if a not in stored:
            raise LayoutError(f"delta attribute {a} is not stored by this layout")
    if len(set(stored)) != len(stored):
        raise LayoutError("an attribute is stored in more than one column group")
    perm = None
    if any(ids != id_lists[0] for ids in id_lists):
        blob = bytearray()
        for ids in id_lists:
            ranks = [0] * n
            for rank, i in enumerate(ids):
                ranks[i] = rank
            blob += struct.pack(f"<{n}Q", *ids) + struct.pack(f"<{n}Q", *ranks)
        perm = SegmentPlan("blob", "permutation", bytes(blob), n * len(segs), Ordering("custom"), "plain",
                           dict(role="permutation", payload_len=len(blob), count=n))
    orders = {s.ordering for s in segs}
    ordering = segs[0].ordering if len(orders) == 1 else Ordering("custom")
    return RenderPlan(segs, ordering, n, permutation=perm)


def _labels_in(value) -> set:
    leaves: list = []
    _skeleton(value, bytearray(), leaves)
    return set(leaves[0].labels) if leaves and is_record(leaves[0]) else set()


def _leaf_scalars(v):
    if isinstance(v, tuple):
        for c in v:
            yield from _leaf_scalars(c)
    else:
        yield v


def _wrap_scalars(v, label):
    if not isinstance(v, tuple):
        return Nest((v,), (label,))
    if is_record(v):
        return None
    kids = [_wrap_scalars(c, label) for c in v]
    if any(k is None for k in kids):
        return None
    return Nest(kids)


def plan_render(table: LogicalTable, expr: Any, allow_drop: bool = False) -> RenderPlan:
    env = Env({table.name: table})
    delta: tuple = ()
    e = expr
    if isinstance(e, Transform) and e.name == "delta" and len(e.inputs) == 1 and e.args:
        delta = tuple(a if isinstance(a, str) else a.attr for a in e.flat_args)
        e = e.inputs[0]
    for node in walk(e):
        if isinstance(node, Transform) and node.name == "delta":
            raise LayoutError("delta is only storable as the outermost transform of a layout")
    plan = None
    if isinstance(e, Transform) and (_is_grid(e) or (e.name == "zorder" and len(e.inputs) == 1
                                                     and _is_grid(e.inputs[0]))):
        plan = _cells_plan(table, env, e, delta)
    elif isinstance(e, ListExpr) and e.items and all(isinstance(i, Comprehension) for i in e.items):
        plan = _columns_plan(table, env, e, delta)
    if plan is None:
        value = evaluate(e, env)
        if isinstance(value, tuple) and not is_record(value) and len(value) == 1 \
                and isinstance(value[0], tuple) and not is_record(value[0]):
            value = value[0]  # a single-item list wraps the real layout
        ordering = infer_ordering(e)
        labels = table.labels
        kinds = tuple(table.column_type(a) for a in labels)
        seg = _records_segment(value, delta, labels, kinds, "rows", ordering)
        if seg is None:
            if delta:
                raise LayoutError("delta needs a layout of flat records")
            seg = _generic_segment(value, ordering)
        plan = RenderPlan([seg], ordering, seg.entries)
    _check_complete(table, plan, allow_drop)
    return plan


def _check_complete(table: LogicalTable, plan: RenderPlan, allow_drop: bool = False) -> None:
    n = len(table.records)
    if not n:
        return
    for s in plan.segments:
        if s.entries != n:
            raise LayoutError(f"layout stores {s.entries} records, table has {n}")
    if all(s.role != "generic" for s in plan.segments):
        stored = {a for s in plan.segments for a in s.info["labels"]}
        missing = [a for a in table.labels if a not in stored]
        if missing and not allow_drop:
            raise LayoutError(f"layout drops attribute(s) {', '.join(missing)}")


# --------------------------------------------------------------------------
# database

@dataclass
class _Extent:
    first: int
    span: int


class Database:
    """A single-file database holding any number of tables."""

    def __init__(self, pf: PageFile):
        self.pf = pf
        self.tables: dict[str, StoredTable] = {}
        self.catalog: list[CatalogEntry] = []
        self.next_id = 1
        self._write_lock = threading.Lock()
        self.directory_cache: dict[int, tf.CellDirectory] = {}
        self.cursors: dict[str, int] = {}
        # test hook: called with a stage name during commit
        self.fault_hook: Callable[[str], None] | None = None

    # -- lifecycle
    @classmethod
    def create(cls, path: str, page_size: int | None = None) -> "Database":
        pf = PageFile.create(path, page_size or int(os.environ.get("RODENTSTORE_PAGE_SIZE", 8192)))
        db = cls(pf)
        db._commit(lambda _: {}, [])
        pf.reset_counters()
        return db

    @classmethod
    def open(cls, path: str) -> "Database":
        pf = PageFile.open(path)
        db = cls(pf)
        try:
            db._load_catalog()
        except Exception:
            pf.close()
            raise
        pf.reset_counters()
        return db

    def close(self) -> None:
        self.pf.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def page_size(self) -> int:
        return self.pf.page_size

    # -- reading committed state
    def _read_catalog_bytes(self, page: int) -> bytes:
        buf = b""
        while True:
            buf += self.pf.read_page(page)
            page += 1
            try:
                decode_catalog(buf)
                return buf
            except Exception:
                if page >= self.pf.page_count:
                    raise StorageError("corrupt catalog")

    def _load_catalog(self) -> None:
        if self.pf.catalog_page == 0:
            raise StorageError("database has no committed catalog")
        self.catalog = decode_catalog(self._read_catalog_bytes(self.pf.catalog_page))
        by_id = {e.id: e for e in self.catalog}
        meta_entry = by_id.get(METADATA_ID)
        if meta_entry is None:
            raise StorageError("catalog lacks the metadata segment")
        raw = self.pf.read_run(meta_entry.first_page, meta_entry.span)
        n, pos = decode_varint(raw, 0)
        meta = json.loads(raw[pos:pos + n].decode("utf-8"))
        self.next_id = meta["next_id"]
        segs = {int(k): v for k, v in meta["segments"].items()}
        tables = {}
        for name, t in meta["tables"].items():
            def seg(i):
                return None if i is None else Segment.from_json(by_id[i], segs[i])
            tables[name] = StoredTable(
                name, parse_schema(t["schema"]), t["layout"], t["record_count"],
                [seg(i) for i in t["segments"]], _ordering_from_json(t["ordering"]),
                seg(t["directory"]), seg(t["permutation"]), tuple(t["grid_attrs"]))
        self.tables = tables

    def _occupied(self) -> list[_Extent]:
        ext = [_Extent(0, 1)]
        ext += [_Extent(e.first_page, e.span) for e in self.catalog]
        if self.pf.catalog_page:
            n = len(encode_catalog(self.catalog))
            ext.append(_Extent(self.pf.catalog_page, max(1, -(-n // self.page_size))))
        return ext

    # -- commit
    def _commit(self, build: Callable[[list], dict], pending: list) -> None:
        """Write `pending` (SegmentPlan, id) pairs into pages unused by the
        committed catalog, then make `build(segments)` the committed tables."""
        occupied = self._occupied()
        allocated: list[_Extent] = []

        def allocate(span: int) -> int:
            cursor = 1
            for x in sorted(occupied + allocated, key=lambda x: x.first):
                if x.first - cursor >= span:
                    break
                cursor = max(cursor, x.first + x.span)
            allocated.append(_Extent(cursor, span))
            return cursor

        written = []
        for plan, sid in pending:
            span = max(1, -(-len(plan.data) // self.page_size))
            first = allocate(span)
            self.pf.write_run(first, plan.data)
            entry = CatalogEntry(sid, plan.kind, first, span, plan.entries, plan.ordering, plan.encoding)
            written.append(Segment(entry, **plan.info))
        self._hook("segments-written")
        tables = build(written)

        seg_meta = {}
        catalog = []
        for t in tables.values():
            for s in t.all_segments():
                seg_meta[str(s.id)] = s.to_json()
                catalog.append(s.entry)
        meta = {"version": 1, "next_id": self.next_id, "segments": seg_meta,
                "tables": {n: t.to_json() for n, t in sorted(tables.items())}}
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        blob = encode_varint(len(raw)) + raw
        first = allocate(max(1, -(-len(blob) // self.page_size)))
        span = self.pf.write_run(first, blob)
        catalog.insert(0, CatalogEntry(METADATA_ID, "blob", first, span, 1, Ordering("custom"), "plain"))
        cat_bytes = encode_catalog(catalog)
        cat_page = allocate(max(1, -(-len(cat_bytes) // self.page_size)))
        self.pf.write_run(cat_page, cat_bytes)
        self.pf.sync()
        self._hook("before-swap")
        self.pf.write_header(cat_page)
        self.pf.sync()
        self.catalog = catalog
        self.tables = tables
        self.cursors.clear()
        self._hook("after-swap")

    def _hook(self, stage: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(stage)

    def _new_id(self) -> int:
        sid = self.next_id
        self.next_id += 1
        return sid

    # -- table operations
    def create_table(self, name: str, schema: Nesting | str) -> StoredTable:
        if isinstance(schema, str):
            schema = parse_schema(schema)
        with self._write_lock:
            if name in self.tables:
                raise StorageError(f"table {name} already exists")
            logical = LogicalTable(name, schema, ())
            return self._render_commit(logical, default_layout(name), parse(default_layout(name)))

    def drop_table(self, name: str) -> None:
        with self._write_lock:
            self._table(name)
            tables = dict(self.tables)
            del tables[name]
            self._commit(lambda _: tables, [])

    def _table(self, name: str) -> StoredTable:
        try:
            return self.tables[name]
        except KeyError:
            raise StorageError(f"no table named {name}") from None

    def logical_table(self, name: str) -> LogicalTable:
        from .access import scan
        t = self._table(name)
        return LogicalTable(name, t.schema, list(scan(self, name)))

    def load(self, name: str, records: Iterable) -> StoredTable:
        with self._write_lock:
            t = self._table(name)
            from .access import scan
            existing = list(scan(self, name))
            logical = LogicalTable(name, t.schema, existing + [tuple(r) for r in records])
            return self._render_commit(logical, t.layout, parse(t.layout))

    def reorganize(self, name: str, expr: Any, allow_drop: bool = False) -> StoredTable:
        """Eagerly re-render `name` under a new layout expression.

        With `allow_drop` the layout may leave attributes out; the table's
        schema then narrows to the attributes it still stores.
        """
        if isinstance(expr, str):
            expr = parse(expr)
        with self._write_lock:
            logical = self.logical_table(name)
            return self._render_commit(logical, format_expr(expr), expr, allow_drop)

    render = reorganize

    def _render_commit(self, logical: LogicalTable, layout_text: str, expr: Any,
                       allow_drop: bool = False) -> StoredTable:
        plan = plan_render(logical, expr, allow_drop)  # raises before anything is written
        schema = logical.schema
        if allow_drop and all(s.role != "generic" for s in plan.segments):
            stored = {a for s in plan.segments for a in s.info["labels"]}
            schema = Nesting(tuple(c for c in schema.children if c.label in stored))
        extras = [p for p in (plan.directory, plan.permutation) if p is not None]
        next_id_before = self.next_id
        pending = [(sp, self._new_id()) for sp in plan.segments + extras]
        staged = StoredTable(logical.name, schema, layout_text, plan.record_count, [],
                             plan.ordering, grid_attrs=plan.grid_attrs)

        def build(written: list) -> dict:
            k = len(plan.segments)
            staged.segments = written[:k]
            rest = iter(written[k:])
            staged.directory = next(rest) if plan.directory is not None else None
            staged.permutation = next(rest) if plan.permutation is not None else None
            tables = dict(self.tables)
            tables[logical.name] = staged
            return tables

        try:
            self._commit(build, pending)
        except BaseException:
            self.next_id = next_id_before
            raise
        return staged

    # -- statistics
    def stats(self) -> dict:
        out = {"page_size": self.page_size, "page_count": self.pf.page_count,
               "counters": self.pf.counters.as_dict(), "tables": {}}
        for name, t in sorted(self.tables.items()):
            out["tables"][name] = {
                "schema": schema_to_text(t.schema), "layout": t.layout, "records": t.record_count,
                "bytes_on_disk": t.bytes_on_disk(),
                "orderings": [o.describe() for o in t.orderings()],
                "segments": [{"id": s.id, "kind": s.entry.kind, "role": s.role, "first_page": s.entry.first_page,
                              "span": s.entry.span, "entries": s.entry.entries,
                              "ordering": s.entry.ordering.describe(), "encoding": s.entry.encoding,
                              "labels": list(s.labels), "bytes": s.byte_len}
                             for s in t.all_segments()],
            }
        return out
