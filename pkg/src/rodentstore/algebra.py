"""Core data model: scalar and nested types, values, logical tables and the
layout-expression syntax tree shared by the parser, evaluator and advisor."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


class SchemaError(ValueError):
    """Raised for malformed schemas, labels or records."""


def is_identifier(name: object) -> bool:
    return isinstance(name, str) and IDENT_RE.match(name) is not None


# --------------------------------------------------------------------------
# scalar kinds

class ScalarType(enum.Enum):
    INT = "int"
    FLOAT = "float"
    STR = "string"


_SCALAR_NAMES: dict[str, ScalarType] = {
    "int": ScalarType.INT,
    "float": ScalarType.FLOAT,
    "string": ScalarType.STR,
}


def register_scalar_name(name: str, kind: ScalarType) -> None:
    """Make `name` usable in schema text as an alias for `kind`."""
    if not is_identifier(name):
        raise SchemaError(f"invalid type name {name!r}")
    _SCALAR_NAMES[name.lower()] = kind


for _alias, _kind in (("integer", ScalarType.INT), ("double", ScalarType.FLOAT),
                      ("str", ScalarType.STR), ("text", ScalarType.STR)):
    register_scalar_name(_alias, _kind)


def scalar_type_from_name(name: str) -> ScalarType:
    try:
        return _SCALAR_NAMES[name.lower()]
    except KeyError:
        raise SchemaError(f"unknown type name {name!r}") from None


def scalar_kind(value: object) -> ScalarType | None:
    # bool is an int subclass but never a storable scalar
    t = type(value)
    if t is int:
        return ScalarType.INT
    if t is float:
        return ScalarType.FLOAT
    if t is str:
        return ScalarType.STR
    return None


# --------------------------------------------------------------------------
# values

class Nest(tuple):
    """An ordered, immutable nesting of values.

    ``labels`` is either None (a plain list) or a tuple holding one optional
    label per child, which marks the nesting as a *record*.  Labels take no
    part in equality or hashing.
    """

    def __new__(cls, items: Iterable[Any] = (), labels: Iterable[str | None] | None = None):
        self = super().__new__(cls, items)
        if labels is not None:
            labels = tuple(labels)
            if len(labels) != len(self):
                raise ValueError(f"{len(labels)} labels for {len(self)} children")
        self.labels = labels
        return self

    def __repr__(self) -> str:
        body = ", ".join(repr(v) for v in self)
        if self.labels is None:
            return f"[{body}]"
        return "{" + ", ".join(f"{lab}: {v!r}" if lab else repr(v)
                               for lab, v in zip(self.labels, self)) + "}"

    @property
    def is_record(self) -> bool:
        return self.labels is not None

    def index_of(self, label: str) -> int | None:
        if self.labels is None:
            return None
        try:
            return self.labels.index(label)
        except ValueError:
            return None

    def field(self, label: str) -> Any:
        i = self.index_of(label)
        if i is None:
            raise KeyError(label)
        return self[i]


def record(**fields: Any) -> Nest:
    return Nest(fields.values(), fields.keys())


def is_record(value: object) -> bool:
    return isinstance(value, Nest) and value.labels is not None


def to_nest(value: Any) -> Any:
    """Convert nested Python lists/tuples into Nest values (labels kept)."""
    if isinstance(value, Nest):
        return Nest((to_nest(v) for v in value), value.labels)
    if isinstance(value, (list, tuple)):
        return Nest(to_nest(v) for v in value)
    return value


def to_py(value: Any) -> Any:
    """Convert a value into plain nested Python lists."""
    if isinstance(value, tuple):
        return [to_py(v) for v in value]
    return value


# --------------------------------------------------------------------------
# nested types

@dataclass(frozen=True)
class Scalar:
    kind: ScalarType

    def __str__(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class Labeled:
    label: str
    inner: "NestedType"

    def __post_init__(self):
        if not is_identifier(self.label):
            raise SchemaError(f"invalid label {self.label!r}")

    def __str__(self) -> str:
        return f"{self.label}:{self.inner}"


@dataclass(frozen=True)
class Nesting:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        seen = set()
        for child in self.children:
            if isinstance(child, Labeled):
                if child.label in seen:
                    raise SchemaError(f"duplicate label {child.label!r}")
                seen.add(child.label)

    @property
    def labels(self) -> tuple[str | None, ...]:
        return tuple(c.label if isinstance(c, Labeled) else None for c in self.children)

    def __str__(self) -> str:
        return "[" + ", ".join(str(c) for c in self.children) + "]"


@dataclass(frozen=True)
class ListOf:
    """Homogeneous variable-length nesting; ``item`` is None when unknown (empty)."""
    item: "NestedType | None"

    def __str__(self) -> str:
        return f"[{self.item if self.item is not None else '?'}...]"


NestedType = Scalar | Labeled | Nesting | ListOf

INT = Scalar(ScalarType.INT)
FLOAT = Scalar(ScalarType.FLOAT)
STR = Scalar(ScalarType.STR)


def conforms(value: Any, t: NestedType) -> bool:
    if isinstance(t, Labeled):
        return conforms(value, t.inner)
    if isinstance(t, Scalar):
        return scalar_kind(value) is t.kind
    if isinstance(t, Nesting):
        return (isinstance(value, (tuple, list)) and len(value) == len(t.children)
                and all(conforms(v, c) for v, c in zip(value, t.children)))
    if isinstance(t, ListOf):
        if not isinstance(value, (tuple, list)):
            return False
        if t.item is None:
            return len(value) == 0
        return all(conforms(v, t.item) for v in value)
    return False


def unlabel(t: NestedType) -> NestedType:
    while isinstance(t, Labeled):
        t = t.inner
    return t


def infer_type(value: Any) -> NestedType:
    kind = scalar_kind(value)
    if kind is not None:
        return Scalar(kind)
    if isinstance(value, Nest) and value.labels is not None:
        return Nesting(tuple(Labeled(lab, infer_type(v)) if lab else infer_type(v)
                             for lab, v in zip(value.labels, value)))
    if isinstance(value, (tuple, list)):
        item = None
        for v in value:
            item = infer_type(v) if item is None else unify(item, infer_type(v))
        return ListOf(item)
    raise SchemaError(f"value {value!r} has no storage type")


def unify(a: NestedType | None, b: NestedType | None) -> NestedType | None:
    if a is None:
        return b
    if b is None or a == b:
        return a
    if isinstance(a, ListOf) and isinstance(b, ListOf):
        return ListOf(unify(a.item, b.item))
    if isinstance(a, Labeled) and isinstance(b, Labeled) and a.label == b.label:
        return Labeled(a.label, unify(a.inner, b.inner))
    if isinstance(a, Nesting) and isinstance(b, Nesting) and len(a.children) == len(b.children):
        return Nesting(tuple(unify(x, y) for x, y in zip(a.children, b.children)))
    raise SchemaError(f"incompatible types {a} and {b}")


def type_to_json(t: NestedType | None) -> Any:
    if t is None:
        return None
    if isinstance(t, Scalar):
        return t.kind.value
    if isinstance(t, Labeled):
        return {"label": t.label, "type": type_to_json(t.inner)}
    if isinstance(t, Nesting):
        return {"nesting": [type_to_json(c) for c in t.children]}
    return {"list": type_to_json(t.item)}


def type_from_json(obj: Any) -> NestedType | None:
    if obj is None:
        return None
    if isinstance(obj, str):
        return Scalar(ScalarType(obj))
    if "label" in obj:
        return Labeled(obj["label"], type_from_json(obj["type"]))
    if "nesting" in obj:
        return Nesting(tuple(type_from_json(c) for c in obj["nesting"]))
    return ListOf(type_from_json(obj["list"]))


# --------------------------------------------------------------------------
# logical tables

def parse_schema(text: str) -> Nesting:
    """Parse ``name:type,name:type`` into a record type."""
    children = []
    for part in text.split(","):
        token = part.strip()
        if ":" not in token:
            raise SchemaError(f"expected name:type, got {token!r}")
        name, _, tname = (s.strip() for s in token.partition(":"))
        if not is_identifier(name):
            raise SchemaError(f"invalid attribute name {name!r}")
        children.append(Labeled(name, Scalar(scalar_type_from_name(tname))))
    return Nesting(tuple(children))


def schema_to_text(schema: Nesting) -> str:
    return ",".join(f"{c.label}:{unlabel(c).kind.value}" for c in schema.children)


def schema_labels(schema: Nesting) -> tuple[str, ...]:
    return tuple(c.label for c in schema.children)


@dataclass(frozen=True)
class LogicalTable:
    name: str
    schema: Nesting
    records: tuple = ()

    def __post_init__(self):
        if not is_identifier(self.name):
            raise SchemaError(f"invalid table name {self.name!r}")
        if not self.schema.children:
            raise SchemaError("empty schema")
        for c in self.schema.children:
            if not (isinstance(c, Labeled) and isinstance(c.inner, Scalar)):
                raise SchemaError("table schemas hold labeled scalars only")
        labels = self.labels
        recs = []
        for r in self.records:
            rec = r if isinstance(r, Nest) and r.labels == labels else Nest(r, labels)
            if not conforms(rec, self.schema):
                raise SchemaError(f"record {list(r)!r} does not match schema {self.schema}")
            recs.append(rec)
        object.__setattr__(self, "records", tuple(recs))

    @property
    def labels(self) -> tuple[str, ...]:
        return schema_labels(self.schema)

    def column_type(self, label: str) -> ScalarType:
        for c in self.schema.children:
            if c.label == label:
                return c.inner.kind
        raise KeyError(label)

    def as_value(self) -> Nest:
        return Nest(self.records)


def coerce_record(schema: Nesting, raw: Iterable[Any]) -> tuple:
    """Convert raw (e.g. CSV text) fields to the schema's scalar kinds."""
    raw = list(raw)
    if len(raw) != len(schema.children):
        raise SchemaError(f"expected {len(schema.children)} fields, got {len(raw)}")
    out = []
    for c, v in zip(schema.children, raw):
        kind = c.inner.kind
        try:
            if kind is ScalarType.INT:
                out.append(int(v))
            elif kind is ScalarType.FLOAT:
                out.append(float(v))
            else:
                out.append(str(v))
        except (TypeError, ValueError):
            raise SchemaError(f"cannot read {v!r} as {kind.value} for {c.label}") from None
    return tuple(out)


# --------------------------------------------------------------------------
# layout expressions

@dataclass(frozen=True)
class SourceSpan:
    start: int
    end: int
    line: int
    column: int

    def __post_init__(self):
        if self.start > self.end or self.line < 1 or self.column < 1:
            raise ValueError(f"invalid span {self}")


@dataclass(frozen=True)
class Node:
    span: SourceSpan | None = field(default=None, compare=False, repr=False, kw_only=True)


def _strict_key(v: Any) -> Any:
    if isinstance(v, tuple):
        return ("n", tuple(_strict_key(x) for x in v))
    if isinstance(v, float):
        return ("f", repr(v))
    return (type(v).__name__, v)


@dataclass(frozen=True, eq=False)
class Literal(Node):
    value: Any

    def __post_init__(self):
        object.__setattr__(self, "value", to_nest(self.value))

    def __eq__(self, other):
        return type(other) is Literal and _strict_key(self.value) == _strict_key(other.value)

    def __hash__(self):
        return hash(_strict_key(self.value))


@dataclass(frozen=True)
class TableRef(Node):
    name: str


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class FieldAccess(Node):
    base: Any
    label: str


@dataclass(frozen=True)
class ListExpr(Node):
    items: tuple


@dataclass(frozen=True)
class Comprehension(Node):
    head: Any
    qualifiers: tuple


@dataclass(frozen=True)
class AttrStride(Node):
    """Transform argument ``attr:stride`` with an optional ``:origin``."""
    attr: str
    stride: int | float
    origin: int | float | None = None


@dataclass(frozen=True)
class Transform(Node):
    name: str
    args: tuple  # groups separated by ';', each a tuple of arguments
    inputs: tuple

    @property
    def flat_args(self) -> tuple:
        return tuple(a for group in self.args for a in group)


@dataclass(frozen=True)
class Arith(Node):
    op: str
    operands: tuple


@dataclass(frozen=True)
class HelperCall(Node):
    name: str
    args: tuple


@dataclass(frozen=True)
class Generator(Node):
    var: str
    source: Any


@dataclass(frozen=True)
class Condition(Node):
    expr: Any


@dataclass(frozen=True)
class OrderBy(Node):
    keys: tuple  # of (expr, "ASC" | "DESC")


@dataclass(frozen=True)
class GroupBy(Node):
    key: Any


@dataclass(frozen=True)
class PartitionBy(Node):
    pairs: tuple  # of (expr, stride)


@dataclass(frozen=True)
class Limit(Node):
    count: Any


TRANSFORM_NAMES = frozenset({"project", "append", "select", "partition", "fold", "unfold",
                             "prejoin", "delta", "zorder", "transpose", "grid"})
# transforms whose first argument group names a variable bound in later groups
BINDER_TRANSFORMS = frozenset({"select", "partition"})
HELPER_NAMES = frozenset({"pos", "count", "bin", "interleave", "zip"})
BINARY_OPS = ("or", "and", "=", "!=", "<", "<=", ">", ">=", "+", "-", "*", "/", "%")


def walk(expr: Any):
    """Yield every node of an expression tree in preorder."""
    yield expr
    for child in children(expr):
        yield from walk(child)


def children(expr: Any) -> list:
    if isinstance(expr, FieldAccess):
        return [expr.base]
    if isinstance(expr, ListExpr):
        return list(expr.items)
    if isinstance(expr, Comprehension):
        return list(expr.qualifiers) + [expr.head]
    if isinstance(expr, Transform):
        return [a for a in expr.flat_args if isinstance(a, Node) and not isinstance(a, AttrStride)] + list(expr.inputs)
    if isinstance(expr, (Arith,)):
        return list(expr.operands)
    if isinstance(expr, HelperCall):
        return list(expr.args)
    if isinstance(expr, Generator):
        return [expr.source]
    if isinstance(expr, Condition):
        return [expr.expr]
    if isinstance(expr, OrderBy):
        return [k for k, _ in expr.keys]
    if isinstance(expr, GroupBy):
        return [expr.key]
    if isinstance(expr, PartitionBy):
        return [k for k, _ in expr.pairs]
    if isinstance(expr, Limit):
        return [expr.count]
    return []


# --------------------------------------------------------------------------
# binding pass

@dataclass(frozen=True)
class BindError:
    message: str
    span: SourceSpan | None = None

    def __str__(self) -> str:
        if self.span is None:
            return self.message
        return f"{self.span.line}:{self.span.column}: {self.message}"


_UNKNOWN = None  # label set of an expression whose element labels are not known


def bind_check(expr: Any, env: Iterable[str] | Mapping[str, Iterable[str] | None],
               transforms: Iterable[str] | None = None,
               scope: Iterable[str] = ()) -> list[BindError]:
    """Report unbound variables, unknown tables/labels/transforms.

    ``env`` is either a set of table names or a mapping from table name to
    the labels of its records (None when unknown).  ``scope`` names variables
    already bound outside the expression.  An empty result means the
    expression is well bound.
    """
    if isinstance(env, Mapping):
        tables = {k: (frozenset(v) if v is not None else _UNKNOWN) for k, v in env.items()}
    else:
        tables = {k: _UNKNOWN for k in env}
    if transforms is None:
        from .engine import registered_transforms
        transforms = registered_transforms()
    checker = _Binder(tables, frozenset(transforms))
    checker.check(expr, {v: _UNKNOWN for v in scope})
    return checker.errors


class _Binder:
    def __init__(self, tables, transforms):
        self.tables = tables
        self.transforms = transforms
        self.errors: list[BindError] = []

    def error(self, msg, node):
        self.errors.append(BindError(msg, getattr(node, "span", None)))

    # scope maps variable -> frozenset of labels of the bound element (or None)
    def check(self, e, scope) -> frozenset | None:
        """Check `e`; return the labels of its *elements* if known."""
        if isinstance(e, Literal):
            return _UNKNOWN
        if isinstance(e, TableRef):
            if e.name not in self.tables:
                self.error(f"unknown table {e.name}", e)
                return _UNKNOWN
            return self.tables[e.name]
        if isinstance(e, Var):
            if e.name not in scope:
                self.error(f"unbound variable {e.name}", e)
            return _UNKNOWN
        if isinstance(e, FieldAccess):
            base_labels = self._value_labels(e.base, scope)
            self.check(e.base, scope)
            if base_labels is not _UNKNOWN and e.label not in base_labels:
                self.error(f"unknown label {e.label}", e)
            return _UNKNOWN
        if isinstance(e, ListExpr):
            for item in e.items:
                self.check(item, scope)
            return _UNKNOWN
        if isinstance(e, Comprehension):
            inner = dict(scope)
            for q in e.qualifiers:
                if isinstance(q, Generator):
                    labels = self.check(q.source, inner)
                    inner[q.var] = labels
                else:
                    for c in children(q):
                        self.check(c, inner)
            self.check(e.head, inner)
            return _head_labels(e.head)
        if isinstance(e, Transform):
            return self._transform(e, scope)
        if isinstance(e, Arith):
            for o in e.operands:
                self.check(o, scope)
            return _UNKNOWN
        if isinstance(e, HelperCall):
            if e.name not in HELPER_NAMES:
                self.error(f"unknown helper {e.name}", e)
            if e.name == "pos" and not (len(e.args) == 1 and isinstance(e.args[0], Var)):
                self.error("pos() takes one generator variable", e)
            for a in e.args:
                self.check(a, scope)
            return _UNKNOWN
        return _UNKNOWN

    def _value_labels(self, e, scope):
        # labels of the value `e` itself (not of its elements)
        if isinstance(e, Var):
            return scope.get(e.name, _UNKNOWN)
        return _UNKNOWN

    def _transform(self, e: Transform, scope):
        if e.name not in self.transforms:
            self.error(f"unknown transform {e.name}", e)
        input_labels = [self.check(i, scope) for i in e.inputs]
        first = input_labels[0] if input_labels else _UNKNOWN
        if e.name in BINDER_TRANSFORMS and e.args:
            names = [a for a in e.args[0] if isinstance(a, str)]
            inner = dict(scope)
            for n in names:
                inner[n] = first
            for group in e.args[1:]:
                for a in group:
                    if isinstance(a, Node):
                        self.check(a, inner)
            return first
        attrs = [a.attr if isinstance(a, AttrStride) else a for a in e.flat_args
                 if isinstance(a, (str, AttrStride))]
        if e.name in ("project", "fold", "grid", "delta", "prejoin") and first is not _UNKNOWN:
            for a in attrs:
                if a not in first:
                    self.error(f"unknown label {a}", e)
        for a in e.flat_args:
            if isinstance(a, Node) and not isinstance(a, AttrStride):
                self.check(a, scope)
        if e.name == "project":
            return frozenset(attrs)
        if e.name in ("select", "delta"):
            return first
        return _UNKNOWN


def _head_labels(head):
    if isinstance(head, ListExpr):
        labels = [i.label for i in head.items if isinstance(i, FieldAccess)]
        if len(labels) == len(head.items) and len(set(labels)) == len(labels):
            return frozenset(labels)
    return _UNKNOWN
