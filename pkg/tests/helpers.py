"""Random generators shared by the property tests (seeded, so failures replay)."""
from __future__ import annotations

import random

from rodentstore.algebra import (
    Arith, AttrStride, Comprehension, Condition, FieldAccess, Generator, GroupBy, HelperCall, Limit,
    ListExpr, Literal, Nest, OrderBy, PartitionBy, TableRef, Transform, Var,
)

TABLES = ("T", "Orders", "Traces")
VARS = ("r", "x", "v", "q", "w")
LABELS = ("a", "b", "lat", "lon", "t", "Zip")


def rand_scalar(rng: random.Random):
    k = rng.randrange(3)
    if k == 0:
        return rng.randint(-2 ** 63, 2 ** 63 - 1) if rng.random() < 0.2 else rng.randint(-1000, 1000)
    if k == 1:
        return rng.choice([0.0, -0.0, 1.5, -2.25, 1e-300, 3.141592653589793, rng.uniform(-1e6, 1e6)])
    return "".join(rng.choice("abé中\"\\ \n") for _ in range(rng.randrange(6)))


def rand_nesting(rng: random.Random, depth: int = 5, fanout: int = 8):
    if depth == 0 or rng.random() < 0.3:
        return rand_scalar(rng)
    return Nest(rand_nesting(rng, depth - 1, fanout) for _ in range(rng.randrange(fanout + 1)))


# --------------------------------------------------------------------------
# ASTs in the resolved form the parser produces

def _literal(rng):
    k = rng.randrange(5)
    if k == 0:
        return Literal(rng.randint(-50, 500))
    if k == 1:
        return Literal(rng.choice([0.5, 2.0, -1.25, 1e-7, 12345.678]))
    if k == 2:
        return Literal(rng.choice(["", "x", "a b", "q\"uote", "back\\slash"]))
    if k == 3:
        return Literal(rng.random() < 0.5)
    return Literal(Nest(Nest(rng.randint(0, 9) for _ in range(rng.randrange(3))) for _ in range(rng.randrange(3))))


def rand_expr(rng: random.Random, scope: tuple = (), depth: int = 3):
    """A random expression whose bare names resolve as the parser would resolve them."""
    if depth <= 0:
        choices = ["lit", "table"] + (["var", "field"] if scope else [])
    else:
        choices = ["lit", "table", "arith", "arith", "not", "comp", "comp", "transform", "transform",
                   "helper", "list"] + (["var", "field", "field"] if scope else [])
    kind = rng.choice(choices)
    sub = lambda s=scope: rand_expr(rng, s, depth - 1)  # noqa: E731
    if kind == "lit":
        return _literal(rng)
    if kind == "table":
        return TableRef(rng.choice(TABLES))
    if kind == "var":
        return Var(rng.choice(scope))
    if kind == "field":
        base = Var(rng.choice(scope))
        e = FieldAccess(base, rng.choice(LABELS))
        return FieldAccess(e, rng.choice(LABELS)) if rng.random() < 0.2 else e
    if kind == "arith":
        op = rng.choice(["or", "and", "=", "!=", "<", "<=", ">", ">=", "+", "-", "*", "/", "%"])
        return Arith(op, (sub(), sub()))
    if kind == "not":
        return Arith("not", (sub(),))
    if kind == "helper":
        name = rng.choice(["pos", "count", "bin", "interleave", "zip"])
        n = 1 if name in ("pos", "count", "bin") else 2
        return HelperCall(name, tuple(sub() for _ in range(n)))
    if kind == "list":
        items = [sub() for _ in range(rng.randint(1, 3))]
        if all(isinstance(i, Literal) for i in items):
            items.append(TableRef(rng.choice(TABLES)))
        return ListExpr(tuple(items))
    if kind == "comp":
        return rand_comprehension(rng, scope, depth)
    return rand_transform(rng, scope, depth)


def rand_comprehension(rng, scope, depth):
    quals = []
    inner = scope
    for _ in range(rng.randint(1, 2)):
        var = rng.choice(VARS)
        quals.append(Generator(var, rand_expr(rng, inner, depth - 1)))
        inner = inner + (var,) if var not in inner else inner
    for _ in range(rng.randrange(4)):
        k = rng.randrange(5)
        e = rand_expr(rng, inner, depth - 1)
        if k == 0:
            quals.append(Condition(e))
        elif k == 1:
            keys = tuple((rand_expr(rng, inner, depth - 1), rng.choice(["ASC", "DESC"]))
                         for _ in range(rng.randint(1, 2)))
            quals.append(OrderBy(keys))
        elif k == 2:
            quals.append(GroupBy(e))
        elif k == 3:
            pairs = tuple((rand_expr(rng, inner, depth - 1), rng.choice([1, 2, 0.5, 10]))
                          for _ in range(rng.randint(1, 2)))
            quals.append(PartitionBy(pairs))
        else:
            quals.append(Limit(e))
    head = rand_expr(rng, inner, depth - 1)
    if rng.random() < 0.3:
        head = ListExpr((head, FieldAccess(Var(inner[-1]), rng.choice(LABELS))))
    return Comprehension(head, tuple(quals))


def rand_transform(rng, scope, depth):
    sub = lambda: rand_expr(rng, scope, depth - 1)  # noqa: E731
    names = lambda: tuple(rng.sample(LABELS, rng.randint(1, 3)))  # noqa: E731
    k = rng.choice(["project", "delta", "delta0", "fold", "grid", "zorder", "transpose", "unfold",
                    "prejoin", "append", "select", "partition"])
    if k == "project":
        return Transform("project", (names(),), (sub(),))
    if k == "delta":
        return Transform("delta", (names(),), (sub(),))
    if k == "delta0":
        return Transform("delta", (), (sub(),))
    if k == "fold":
        b = names()
        a = tuple(x for x in LABELS if x not in b)[:1]
        return Transform("fold", (b, a), (sub(),))
    if k == "grid":
        dims = tuple(AttrStride(x, rng.choice([1, 0.01, 2.5]), rng.choice([None, 0, -71.3]))
                     for x in rng.sample(LABELS, rng.randint(1, 2)))
        return Transform("grid", (dims,), (sub(),))
    if k in ("zorder", "transpose", "unfold"):
        return Transform(k, (), (sub(),))
    if k == "prejoin":
        return Transform("prejoin", ((rng.choice(LABELS),),), (sub(), sub()))
    if k == "append":
        return Transform("append", (), (sub(), sub()))
    var = rng.choice(VARS)
    body = rand_expr(rng, scope + (var,), depth - 1)
    return Transform(k, ((var,), (body,)), (sub(),))


# --------------------------------------------------------------------------
# tables

def rand_table_records(rng: random.Random, n: int, labels=("k", "x", "y", "s")) -> list[tuple]:
    keys = rng.randint(1, max(1, n // 3 + 1))
    return [(rng.randrange(keys), round(rng.uniform(0, 1), 6), round(rng.uniform(-5, 5), 6),
             rng.choice(["p", "q", "rr", "sé"])) for _ in range(n)]


# --------------------------------------------------------------------------
# frozen bytes of a page-4096 database holding T(k:int, s:string) = (1,'a'), (2,'b'), (3,'cd')

GOLDEN_HEADER = "52444e540100001000000600000000000000"
GOLDEN_CATALOG = ("0200030200000000000000010000000000000001000000000000000400000002000100000000000000"
                  "010000000000000003000000000000000000")
GOLDEN_ROWS = ("07" "0000000000000000" "0a00000000000000" "1400000000000000"
               "0100000000000000" "0161" "0200000000000000" "0162" "0300000000000000" "026364")


# criterion number -> [(ok, detail)], filled by test_acceptance and printed in the terminal summary
ACCEPTANCE: dict[int, list] = {}
