"""Evaluator for layout expressions.

Comprehension qualifiers run left to right over a tree of binding streams:
generators expand each stream (rightmost generator varying fastest),
conditions filter, orderby sorts stably, groupby and partitionby split a
stream into sub-streams and limit truncates.  The head is evaluated last,
once per surviving binding.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from . import transforms as tf
from .algebra import (
    Arith, AttrStride, Comprehension, Condition, FieldAccess, Generator, GroupBy, HelperCall,
    Limit, ListExpr, Literal, LogicalTable, Nest, OrderBy, PartitionBy, TableRef, Transform, Var,
    bind_check, is_record,
)


class EvalError(Exception):
    def __init__(self, message: str, span=None):
        super().__init__(message)
        self.message = message
        self.span = span

    def __str__(self) -> str:
        if self.span is None:
            return self.message
        return f"{self.span.line}:{self.span.column}: {self.message}"


class NameResolutionError(EvalError):
    """Unknown table, unbound variable, missing label or unknown transform."""


class LabelError(EvalError):
    """A record reached at run time lacks a label its static type did not fix."""


@dataclass
class Env:
    tables: Mapping[str, Any] = field(default_factory=dict)
    bindings: Mapping[str, tuple] = field(default_factory=dict)  # var -> (value, pos)

    def table_value(self, name: str) -> Any:
        t = self.tables[name]
        return t.as_value() if isinstance(t, LogicalTable) else t

    def bind(self, var: str, value: Any, pos: int) -> "Env":
        b = dict(self.bindings)
        b[var] = (value, pos)
        return Env(self.tables, b)


# --------------------------------------------------------------------------
# transform registry

TransformFn = Callable[["_Evaluator", Transform, Env], Any]
_REGISTRY: dict[str, TransformFn] = {}


def register_transform(name: str, fn: TransformFn) -> None:
    """Register `fn(evaluator, node, env)` as the implementation of `name`."""
    _REGISTRY[name] = fn


def registered_transforms() -> frozenset:
    return frozenset(_REGISTRY)


def evaluate(expr: Any, env: Env | Mapping[str, Any]) -> Any:
    """Resolve names against `env`, then evaluate.

    Name resolution is a separate phase run before any value is computed, so
    a misnamed table inside a branch that never executes still fails.
    """
    if not isinstance(env, Env):
        env = Env(dict(env))
    resolve_names(expr, env)
    return _Evaluator().eval(expr, env)


def resolve_names(expr: Any, env: Env) -> None:
    labels = {name: (t.labels if isinstance(t, LogicalTable) else None) for name, t in env.tables.items()}
    errors = bind_check(expr, labels, registered_transforms(), scope=env.bindings)
    if errors:
        first = errors[0]
        raise NameResolutionError(first.message, first.span)


# --------------------------------------------------------------------------

def _float_bits(v: float) -> bytes:
    return struct.pack("<d", v)


def _equal(a: Any, b: Any) -> bool:
    if type(a) is float and type(b) is float:
        return _float_bits(a) == _float_bits(b)
    if isinstance(a, tuple) and isinstance(b, tuple):
        return len(a) == len(b) and all(_equal(x, y) for x, y in zip(a, b))
    if type(a) is bool or type(b) is bool:
        return type(a) is type(b) and a == b
    return a == b


def _is_number(v: Any) -> bool:
    return type(v) in (int, float)


def _order_key(v: Any, node) -> Any:
    if _is_number(v) or type(v) is str:
        return v
    raise EvalError(f"cannot order by non-scalar value {v!r}", node.span)


class _Evaluator:
    def eval(self, e: Any, env: Env) -> Any:
        method = getattr(self, "_" + type(e).__name__, None)
        if method is None:
            raise EvalError(f"cannot evaluate {type(e).__name__}", getattr(e, "span", None))
        return method(e, env)

    def _Literal(self, e: Literal, env: Env):
        return e.value

    def _TableRef(self, e: TableRef, env: Env):
        if e.name not in env.tables:
            raise NameResolutionError(f"unknown table {e.name}", e.span)
        return env.table_value(e.name)

    def _Var(self, e: Var, env: Env):
        if e.name not in env.bindings:
            raise NameResolutionError(f"unbound variable {e.name}", e.span)
        return env.bindings[e.name][0]

    def _FieldAccess(self, e: FieldAccess, env: Env):
        base = self.eval(e.base, env)
        if not is_record(base):
            raise EvalError(f"field access .{e.label} on a non-record value", e.span)
        i = base.index_of(e.label)
        if i is None:
            raise LabelError(f"record has no label {e.label}", e.span)
        return base[i]

    def _ListExpr(self, e: ListExpr, env: Env):
        values = [self.eval(i, env) for i in e.items]
        return Nest(values, _item_labels(e.items))

    def _Arith(self, e: Arith, env: Env):
        op = e.op
        if op in ("and", "or"):
            left = self._boolean(e.operands[0], env)
            if (op == "and" and not left) or (op == "or" and left):
                return left
            return self._boolean(e.operands[1], env)
        if op == "not":
            return not self._boolean(e.operands[0], env)
        a, b = (self.eval(o, env) for o in e.operands)
        if op == "=":
            return _equal(a, b)
        if op == "!=":
            return not _equal(a, b)
        if op in ("<", "<=", ">", ">="):
            if not ((_is_number(a) and _is_number(b)) or (type(a) is str and type(b) is str)):
                raise EvalError(f"cannot compare {a!r} {op} {b!r}", e.span)
            return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]
        if not (_is_number(a) and _is_number(b)):
            raise EvalError(f"arithmetic {op} needs numbers, got {a!r} and {b!r}", e.span)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if b == 0:
            raise EvalError("division by zero", e.span)
        if op == "/":
            return a / b
        if op == "%":
            return a % b
        raise EvalError(f"unknown operator {op}", e.span)

    def _boolean(self, e: Any, env: Env) -> bool:
        v = self.eval(e, env)
        if type(v) is not bool:
            raise EvalError(f"expected a boolean, got {v!r}", getattr(e, "span", None))
        return v

    def _HelperCall(self, e: HelperCall, env: Env):
        name = e.name
        if name == "pos":
            if len(e.args) != 1 or not isinstance(e.args[0], Var):
                raise EvalError("pos() takes one generator variable", e.span)
            v = e.args[0]
            if v.name not in env.bindings:
                raise NameResolutionError(f"unbound variable {v.name}", v.span)
            return env.bindings[v.name][1]
        args = [self.eval(a, env) for a in e.args]
        try:
            if name == "count":
                (n,) = args
                if not isinstance(n, tuple):
                    raise EvalError("count() of a non-nesting", e.span)
                return len(n)
            if name == "bin":
                (n,) = args
                return Nest(tf.bits(n))
            if name == "interleave":
                return tf.interleave(*(tf.bits(a) if type(a) is int else a for a in args))
            if name == "zip":
                if not all(isinstance(a, tuple) for a in args):
                    raise EvalError("zip() of a non-nesting", e.span)
                return Nest(Nest(t) for t in zip(*args))
        except tf.TransformError as ex:
            raise EvalError(str(ex), e.span) from None
        except ValueError as ex:  # wrong arity
            raise EvalError(f"{name}(): {ex}", e.span) from None
        raise NameResolutionError(f"unknown helper {name}", e.span)

    # -- comprehensions

    def _Comprehension(self, e: Comprehension, env: Env):
        # a stream is a list of Envs; a tree is a stream or a list of trees
        tree: Any = _Stream([env])
        for q in e.qualifiers:
            tree = _map_streams(tree, lambda s, q=q: self._apply(q, s))
        return self._emit(e.head, tree)

    def _emit(self, head, tree):
        if isinstance(tree, _Stream):
            return Nest(self.eval(head, b) for b in tree)
        return Nest(self._emit(head, t) for t in tree)

    def _apply(self, q, stream: "_Stream"):
        if isinstance(q, Generator):
            out = _Stream()
            for b in stream:
                source = self.eval(q.source, b)
                if not isinstance(source, tuple):
                    raise EvalError(f"generator source for {q.var} is not a nesting", q.span)
                for i, v in enumerate(source):
                    out.append(b.bind(q.var, v, i))
            return out
        if isinstance(q, Condition):
            return _Stream(b for b in stream if self._boolean(q.expr, b))
        if isinstance(q, OrderBy):
            items = list(stream)
            keyed = [[_order_key(self.eval(k, b), k) for k, _ in q.keys] for b in items]
            order = list(range(len(items)))
            for kpos in reversed(range(len(q.keys))):
                desc = q.keys[kpos][1] == "DESC"
                try:
                    order.sort(key=lambda i: keyed[i][kpos], reverse=desc)
                except TypeError:
                    raise EvalError("orderby keys of mixed kinds", q.span) from None
            return _Stream(items[i] for i in order)
        if isinstance(q, GroupBy):
            groups: dict = {}
            for b in stream:
                k = tf._hash_key(self.eval(q.key, b))
                groups.setdefault(k, _Stream()).append(b)
            return list(groups.values())
        if isinstance(q, PartitionBy):
            return self._partition(list(q.pairs), stream, q)
        if isinstance(q, Limit):
            # evaluated once, in the environment enclosing the stream
            k = self.eval(q.count, stream[0]) if stream else 0
            if type(k) is not int or k < 0:
                raise EvalError(f"limit needs a nonnegative integer, got {k!r}", q.span)
            return _Stream(stream[:k])
        raise EvalError(f"unknown qualifier {q!r}", getattr(q, "span", None))

    def _partition(self, pairs, stream, q):
        if not pairs:
            return stream
        key, stride = pairs[0]
        if not _is_number(stride) or stride <= 0:
            raise EvalError(f"partition stride must be positive, got {stride!r}", q.span)
        keys = []
        for b in stream:
            v = self.eval(key, b)
            if not _is_number(v):
                raise EvalError(f"partition key is not numeric: {v!r}", q.span)
            keys.append(v)
        if not keys:
            return []
        origin = min(keys)
        idx = [math.floor((v - origin) / stride) for v in keys]
        buckets = [_Stream() for _ in range(max(idx) + 1)]
        for b, i in zip(stream, idx):
            buckets[i].append(b)
        return [self._partition(pairs[1:], s, q) for s in buckets]

    # -- transforms

    def _Transform(self, e: Transform, env: Env):
        fn = _REGISTRY.get(e.name)
        if fn is None:
            raise NameResolutionError(f"unknown transform {e.name}", e.span)
        try:
            return fn(self, e, env)
        except tf.UnknownAttribute as ex:
            raise LabelError(f"record has no label {ex.attr}", e.span) from None
        except tf.TransformError as ex:
            raise EvalError(f"{e.name}: {ex}", e.span) from None


class _Stream(list):
    pass


def _map_streams(tree, fn):
    if isinstance(tree, _Stream):
        return fn(tree)
    return [_map_streams(t, fn) for t in tree]


def _item_labels(items) -> tuple | None:
    labels = [i.label if isinstance(i, FieldAccess) else None for i in items]
    seen: dict[str, int] = {}
    for lab in labels:
        if lab is not None:
            seen[lab] = seen.get(lab, 0) + 1
    labels = [lab if lab is not None and seen[lab] == 1 else None for lab in labels]
    return tuple(labels) if any(lab is not None for lab in labels) else None


# --------------------------------------------------------------------------
# builtin transforms

def _names(e: Transform, group: int = 0) -> tuple:
    if group >= len(e.args):
        return ()
    out = []
    for a in e.args[group]:
        if isinstance(a, str):
            out.append(a)
        elif isinstance(a, AttrStride):
            out.append(a.attr)
        else:
            raise EvalError(f"{e.name}: expected attribute names", e.span)
    return tuple(out)


def _inputs(ev: _Evaluator, e: Transform, env: Env, n: int) -> list:
    if len(e.inputs) != n:
        raise EvalError(f"{e.name} takes {n} input(s), got {len(e.inputs)}", e.span)
    return [ev.eval(i, env) for i in e.inputs]


def _binder(ev: _Evaluator, e: Transform, env: Env):
    names = _names(e, 0)
    if len(names) != 1 or len(e.args) < 2:
        raise EvalError(f"{e.name} takes [var; expr]", e.span)
    var = names[0]
    exprs = [x for g in e.args[1:] for x in g]

    def call(value, pos):
        inner = env.bind(var, value, pos)
        results = [ev.eval(x, inner) for x in exprs]
        return results[0] if len(results) == 1 else tuple(results)

    return call


def _t_project(ev, e, env):
    (n,) = _inputs(ev, e, env, 1)
    return tf.project(_names(e), n)


def _t_append(ev, e, env):
    elems, n = _inputs(ev, e, env, 2)
    names = _names(e)
    return tf.append(elems, n, names[0] if names else None)


def _t_select(ev, e, env):
    (n,) = _inputs(ev, e, env, 1)
    call = _binder(ev, e, env)

    def pred(v, i):
        # several condition groups are a conjunction
        r = call(v, i)
        rs = r if type(r) is tuple else (r,)
        for x in rs:
            if type(x) is not bool:
                return x
        return all(rs)

    return tf.select(pred, n)


def _t_partition(ev, e, env):
    (n,) = _inputs(ev, e, env, 1)
    call = _binder(ev, e, env)
    return tf.partition(lambda v, i: tf._hash_key(call(v, i)), n)


def _t_fold(ev, e, env):
    (n,) = _inputs(ev, e, env, 1)
    if len(e.args) != 2:
        raise EvalError("fold takes [B attrs; A attrs]", e.span)
    return tf.fold(_names(e, 0), _names(e, 1), n)


def _t_unfold(ev, e, env):
    (n,) = _inputs(ev, e, env, 1)
    return tf.unfold(n)


def _t_prejoin(ev, e, env):
    n1, n2 = _inputs(ev, e, env, 2)
    names = _names(e)
    if len(names) != 1:
        raise EvalError("prejoin takes one join attribute", e.span)
    return tf.prejoin(names[0], n1, n2)


def _t_delta(ev, e, env):
    (n,) = _inputs(ev, e, env, 1)
    names = _names(e)
    if not names:
        return tf.delta(n)
    return tf.delta_columns(names, n)


def _t_zorder(ev, e, env):
    (n,) = _inputs(ev, e, env, 1)
    return tf.zorder(n)


def _t_transpose(ev, e, env):
    (n,) = _inputs(ev, e, env, 1)
    return tf.transpose(n)


def grid_dims(e: Transform) -> list:
    dims = []
    for a in e.flat_args:
        if isinstance(a, AttrStride):
            dims.append(tf.GridDim(a.attr, a.stride, a.origin))
        elif isinstance(a, str):
            dims.append(tf.GridDim(a))
        else:
            raise EvalError("grid arguments are attr or attr:stride[:origin]", e.span)
    return dims


def _t_grid(ev, e, env):
    (n,) = _inputs(ev, e, env, 1)
    nest, _ = tf.grid(grid_dims(e), n)
    return nest


for _name, _fn in (("project", _t_project), ("append", _t_append), ("select", _t_select),
                   ("partition", _t_partition), ("fold", _t_fold), ("unfold", _t_unfold),
                   ("prejoin", _t_prejoin), ("delta", _t_delta), ("zorder", _t_zorder),
                   ("transpose", _t_transpose), ("grid", _t_grid)):
    register_transform(_name, _fn)
