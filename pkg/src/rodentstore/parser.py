"""Text syntax for layout expressions: tokenizer, recursive-descent parser and
canonical pretty-printer.

Grammar summary (whitespace-insensitive, ``--`` starts a comment)::

    expr      := comp | transform | literal | ref | arith
    comp      := '[' expr (',' expr)* '|' qual (',' qual)* ']'
    qual      := '\\' IDENT '<-' expr | 'orderby' okey (',' okey)*
               | 'groupby' expr | 'partitionby' pkey (',' pkey)*
               | 'limit' expr | expr
    transform := IDENT ('[' targs (';' targs)* ']')? '(' expr (',' expr)* ')'
    targ      := IDENT | NUMBER | IDENT ':' NUMBER (':' NUMBER)? | expr

A program (``.rsa`` file) is a sequence of ``let NAME = expr`` bindings
followed by one expression.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass
from typing import Any

from .algebra import (
    BINDER_TRANSFORMS, HELPER_NAMES, Arith, AttrStride, Comprehension, Condition, FieldAccess,
    Generator, GroupBy, HelperCall, Limit, ListExpr, Literal, Nest, Node, OrderBy, PartitionBy,
    SourceSpan, TableRef, Transform, Var,
)

KEYWORDS = frozenset({"orderby", "groupby", "partitionby", "limit", "ASC", "DESC",
                      "and", "or", "not", "let", "true", "false"})
CLAUSE_KEYWORDS = frozenset({"orderby", "groupby", "partitionby", "limit"})

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>--[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><-|<=|>=|!=|[-+*/%=<>\[\]().,;:|\\])
""", re.VERBOSE)


class ParseError(Exception):
    def __init__(self, message: str, span: SourceSpan, expected: list[str] | None = None):
        super().__init__(message)
        self.message = message or "syntax error"
        self.span = span
        self.expected = list(expected or [])

    def __str__(self) -> str:
        return f"{self.span.line}:{self.span.column}: {self.message}"


@dataclass(frozen=True)
class Token:
    kind: str  # number, string, ident, keyword, op, eof
    text: str
    value: Any
    span: SourceSpan


def _line_starts(text: str) -> list[int]:
    return [0] + [m.end() for m in re.finditer("\n", text)]


def tokenize(text: str) -> list[Token]:
    starts = _line_starts(text)

    def span(a: int, b: int) -> SourceSpan:
        # line index found by linear search from the end (files are small)
        line = len(starts)
        while starts[line - 1] > a:
            line -= 1
        return SourceSpan(a, b, line, a - starts[line - 1] + 1)

    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", span(pos, pos + 1))
        kind = m.lastgroup
        tok_text = m.group()
        if kind == "number":
            is_float = any(c in tok_text for c in ".eE")
            tokens.append(Token("number", tok_text, float(tok_text) if is_float else int(tok_text),
                                span(m.start(), m.end())))
        elif kind == "string":
            try:
                value = json.loads(tok_text)
            except ValueError:
                raise ParseError("invalid string escape", span(m.start(), m.end())) from None
            tokens.append(Token("string", tok_text, value, span(m.start(), m.end())))
        elif kind == "ident":
            tokens.append(Token("keyword" if tok_text in KEYWORDS else "ident", tok_text, tok_text,
                                span(m.start(), m.end())))
        elif kind == "op":
            tokens.append(Token("op", tok_text, tok_text, span(m.start(), m.end())))
        pos = m.end()
    tokens.append(Token("eof", "", None, span(len(text), len(text))))
    return tokens


@dataclass(frozen=True)
class Program:
    bindings: tuple  # of (name, expr)
    expr: Any

    def inlined(self) -> Any:
        """The final expression with every ``let`` name substituted."""
        env: dict[str, Any] = {}
        for name, e in self.bindings:
            env[name] = substitute(e, env)
        return substitute(self.expr, env)


_CMP_OPS = ("=", "!=", "<", "<=", ">", ">=")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0

    # -- token helpers
    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def at(self, *texts: str) -> bool:
        t = self.tok
        return t.kind in ("op", "keyword") and t.text in texts

    def advance(self) -> Token:
        t = self.tok
        if t.kind != "eof":
            self.i += 1
        return t

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.fail(f"expected '{text}'", [text])
        return self.advance()

    def expect_ident(self) -> Token:
        if self.tok.kind != "ident":
            self.fail("expected identifier", ["IDENT"])
        return self.advance()

    def fail(self, message: str, expected: list[str] | None = None):
        t = self.tok
        found = "end of input" if t.kind == "eof" else repr(t.text)
        raise ParseError(f"{message}, found {found}", t.span, expected)

    def span_from(self, start: Token) -> SourceSpan:
        prev = self.tokens[self.i - 1] if self.i > 0 else start
        end = max(prev.span.end, start.span.start)
        return SourceSpan(start.span.start, end, start.span.line, start.span.column)

    # -- grammar
    def program(self) -> Program:
        bindings = []
        while self.at("let"):
            self.advance()
            name = self.expect_ident().text
            self.expect("=")
            bindings.append((name, self.expr()))
        expr = self.expr()
        if self.tok.kind != "eof":
            self.fail("unexpected trailing input", ["end of input"])
        return Program(tuple(bindings), expr)

    def expr(self) -> Any:
        return self.or_expr()

    def _binary(self, ops, sub):
        start = self.tok
        left = sub()
        while self.at(*ops):
            op = self.advance().text
            right = sub()
            left = Arith(op, (left, right), span=self.span_from(start))
        return left

    def or_expr(self):
        return self._binary(("or",), self.and_expr)

    def and_expr(self):
        return self._binary(("and",), self.not_expr)

    def not_expr(self):
        if self.at("not"):
            start = self.advance()
            operand = self.not_expr()
            return Arith("not", (operand,), span=self.span_from(start))
        return self.cmp_expr()

    def cmp_expr(self):
        return self._binary(_CMP_OPS, self.add_expr)

    def add_expr(self):
        return self._binary(("+", "-"), self.mul_expr)

    def mul_expr(self):
        return self._binary(("*", "/", "%"), self.unary)

    def unary(self):
        if self.at("-"):
            start = self.advance()
            if self.tok.kind == "number":
                tok = self.advance()
                return Literal(-tok.value, span=self.span_from(start))
            operand = self.unary()
            return Arith("-", (Literal(0, span=start.span), operand), span=self.span_from(start))
        return self.postfix()

    def postfix(self):
        start = self.tok
        e = self.primary()
        while self.at("."):
            self.advance()
            label = self.expect_ident().text
            e = FieldAccess(e, label, span=self.span_from(start))
        return e

    def primary(self):
        t = self.tok
        if t.kind in ("number", "string"):
            self.advance()
            return Literal(t.value, span=t.span)
        if t.kind == "keyword" and t.text in ("true", "false"):
            self.advance()
            return Literal(t.text == "true", span=t.span)
        if t.kind == "ident":
            if self.peek().kind == "op" and self.peek().text in ("(", "["):
                return self.call()
            self.advance()
            return TableRef(t.text, span=t.span)
        if self.at("("):
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if self.at("["):
            return self.bracket()
        self.fail("expected an expression", ["expression"])

    def bracket(self):
        start = self.expect("[")
        if self.at("]"):
            self.advance()
            return Literal(Nest(), span=self.span_from(start))
        items = [self.expr()]
        while self.at(","):
            self.advance()
            items.append(self.expr())
        if self.at("|"):
            self.advance()
            head = items[0] if len(items) == 1 else ListExpr(tuple(items), span=self.span_from(start))
            quals = self.qualifiers()
            self.expect("]")
            return Comprehension(head, tuple(quals), span=self.span_from(start))
        if not self.at("]"):
            self.fail("expected ']'", ["]", ",", "|"])
        self.advance()
        if all(isinstance(i, Literal) for i in items):
            return Literal(Nest(i.value for i in items), span=self.span_from(start))
        return ListExpr(tuple(items), span=self.span_from(start))

    def qualifiers(self) -> list:
        quals = [self.qualifier()]
        while self.at(","):
            self.advance()
            prev = quals[-1]
            if isinstance(prev, OrderBy) and not self._starts_qualifier():
                key_start = self.tok
                e = self.expr()
                direction = self._direction()
                last_explicit = getattr(prev, "_explicit", True)
                if direction is not None or not last_explicit:
                    new = OrderBy(prev.keys + ((e, direction or "ASC"),), span=prev.span)
                    object.__setattr__(new, "_explicit", direction is not None)
                    quals[-1] = new
                else:
                    quals.append(Condition(e, span=self.span_from(key_start)))
                continue
            if isinstance(prev, PartitionBy) and not self._starts_qualifier():
                key_start = self.tok
                e = self.expr()
                if self.tok.kind == "number":
                    quals[-1] = PartitionBy(prev.pairs + ((e, self.advance().value),), span=prev.span)
                else:
                    quals.append(Condition(e, span=self.span_from(key_start)))
                continue
            quals.append(self.qualifier())
        return quals

    def _starts_qualifier(self) -> bool:
        return self.at("\\", *CLAUSE_KEYWORDS)

    def _direction(self):
        if self.at("ASC", "DESC"):
            return self.advance().text
        return None

    def qualifier(self):
        start = self.tok
        if self.at("\\"):
            self.advance()
            var = self.expect_ident().text
            self.expect("<-")
            source = self.expr()
            return Generator(var, source, span=self.span_from(start))
        if self.at("orderby"):
            self.advance()
            key = self.expr()
            direction = self._direction()
            q = OrderBy(((key, direction or "ASC"),), span=self.span_from(start))
            object.__setattr__(q, "_explicit", direction is not None)
            return q
        if self.at("groupby"):
            self.advance()
            return GroupBy(self.expr(), span=self.span_from(start))
        if self.at("partitionby"):
            self.advance()
            key = self.expr()
            if self.tok.kind != "number":
                self.fail("expected stride after partition key", ["NUMBER"])
            return PartitionBy(((key, self.advance().value),), span=self.span_from(start))
        if self.at("limit"):
            self.advance()
            return Limit(self.expr(), span=self.span_from(start))
        return Condition(self.expr(), span=self.span_from(start))

    def call(self):
        start = self.advance()
        name = start.text
        if name in HELPER_NAMES:
            self.expect("(")
            args = self._expr_list(")")
            return HelperCall(name, tuple(args), span=self.span_from(start))
        groups: list[tuple] = []
        if self.at("["):
            self.advance()
            groups.append(self._targ_group(name, 0))
            while self.at(";"):
                self.advance()
                groups.append(self._targ_group(name, len(groups)))
            self.expect("]")
        self.expect("(")
        inputs = self._expr_list(")")
        return Transform(name, tuple(groups), tuple(inputs), span=self.span_from(start))

    def _expr_list(self, close: str) -> list:
        items = [self.expr()]
        while self.at(","):
            self.advance()
            items.append(self.expr())
        self.expect(close)
        return items

    def _targ_group(self, name: str, index: int) -> tuple:
        args = [self._targ(name, index)]
        while self.at(","):
            self.advance()
            args.append(self._targ(name, index))
        return tuple(args)

    def _signed_number(self):
        neg = False
        if self.at("-"):
            self.advance()
            neg = True
        if self.tok.kind != "number":
            self.fail("expected number", ["NUMBER"])
        v = self.advance().value
        return -v if neg else v

    def _targ(self, name: str, index: int):
        start = self.tok
        if name in BINDER_TRANSFORMS and index >= 1:
            return self.expr()
        if self.tok.kind == "ident" and self.peek().kind == "op" and self.peek().text == ":":
            attr = self.advance().text
            self.advance()
            stride = self._signed_number()
            origin = None
            if self.at(":"):
                self.advance()
                origin = self._signed_number()
            return AttrStride(attr, stride, origin, span=self.span_from(start))
        e = self.expr()
        if type(e) is TableRef:
            return e.name
        if type(e) is Literal and type(e.value) in (int, float):
            return e.value
        return e


def parse(text: str) -> Any:
    """Parse a single expression (``let`` bindings are inlined)."""
    return parse_program(text).inlined()


def parse_program(text: str) -> Program:
    p = _Parser(text)
    prog = p.program()
    bound: set[str] = set()
    bindings = []
    for name, e in prog.bindings:
        bindings.append((name, resolve(e, frozenset())))
        bound.add(name)
    return Program(tuple(bindings), resolve(prog.expr, frozenset()))


# --------------------------------------------------------------------------
# name resolution: bare names bound by an enclosing generator become Vars

def resolve(e: Any, scope: frozenset) -> Any:
    if isinstance(e, TableRef):
        return Var(e.name, span=e.span) if e.name in scope else e
    if isinstance(e, FieldAccess):
        return dataclasses.replace(e, base=resolve(e.base, scope))
    if isinstance(e, ListExpr):
        return dataclasses.replace(e, items=tuple(resolve(i, scope) for i in e.items))
    if isinstance(e, Comprehension):
        quals = []
        inner = scope
        for q in e.qualifiers:
            if isinstance(q, Generator):
                quals.append(dataclasses.replace(q, source=resolve(q.source, inner)))
                inner = inner | {q.var}
            else:
                quals.append(_resolve_qual(q, inner))
        return dataclasses.replace(e, head=resolve(e.head, inner), qualifiers=tuple(quals))
    if isinstance(e, Transform):
        groups = []
        inner = scope
        for gi, group in enumerate(e.args):
            if e.name in BINDER_TRANSFORMS and gi == 0:
                inner = scope | {a for a in group if isinstance(a, str)}
                groups.append(group)
                continue
            groups.append(tuple(resolve(a, inner) if isinstance(a, Node) and not isinstance(a, AttrStride)
                                else a for a in group))
        return dataclasses.replace(e, args=tuple(groups),
                                   inputs=tuple(resolve(i, scope) for i in e.inputs))
    if isinstance(e, Arith):
        return dataclasses.replace(e, operands=tuple(resolve(o, scope) for o in e.operands))
    if isinstance(e, HelperCall):
        return dataclasses.replace(e, args=tuple(resolve(a, scope) for a in e.args))
    return e


def _resolve_qual(q, scope):
    if isinstance(q, Condition):
        return dataclasses.replace(q, expr=resolve(q.expr, scope))
    if isinstance(q, OrderBy):
        return dataclasses.replace(q, keys=tuple((resolve(k, scope), d) for k, d in q.keys))
    if isinstance(q, GroupBy):
        return dataclasses.replace(q, key=resolve(q.key, scope))
    if isinstance(q, PartitionBy):
        return dataclasses.replace(q, pairs=tuple((resolve(k, scope), s) for k, s in q.pairs))
    if isinstance(q, Limit):
        return dataclasses.replace(q, count=resolve(q.count, scope))
    return q


def substitute(e: Any, env: dict) -> Any:
    """Replace TableRefs naming ``let`` bindings by their expressions."""
    if isinstance(e, TableRef):
        return env.get(e.name, e)
    if isinstance(e, FieldAccess):
        return dataclasses.replace(e, base=substitute(e.base, env))
    if isinstance(e, ListExpr):
        return dataclasses.replace(e, items=tuple(substitute(i, env) for i in e.items))
    if isinstance(e, Comprehension):
        quals = []
        for q in e.qualifiers:
            if isinstance(q, Generator):
                quals.append(dataclasses.replace(q, source=substitute(q.source, env)))
            elif isinstance(q, Condition):
                quals.append(dataclasses.replace(q, expr=substitute(q.expr, env)))
            elif isinstance(q, OrderBy):
                quals.append(dataclasses.replace(q, keys=tuple((substitute(k, env), d) for k, d in q.keys)))
            elif isinstance(q, GroupBy):
                quals.append(dataclasses.replace(q, key=substitute(q.key, env)))
            elif isinstance(q, PartitionBy):
                quals.append(dataclasses.replace(q, pairs=tuple((substitute(k, env), s) for k, s in q.pairs)))
            else:
                quals.append(dataclasses.replace(q, count=substitute(q.count, env)))
        return dataclasses.replace(e, head=substitute(e.head, env), qualifiers=tuple(quals))
    if isinstance(e, Transform):
        args = tuple(tuple(substitute(a, env) if isinstance(a, Node) and not isinstance(a, AttrStride) else a
                           for a in g) for g in e.args)
        return dataclasses.replace(e, args=args, inputs=tuple(substitute(i, env) for i in e.inputs))
    if isinstance(e, Arith):
        return dataclasses.replace(e, operands=tuple(substitute(o, env) for o in e.operands))
    if isinstance(e, HelperCall):
        return dataclasses.replace(e, args=tuple(substitute(a, env) for a in e.args))
    return e


# --------------------------------------------------------------------------
# canonical formatting

_PREC = {"or": 1, "and": 2, "not": 3, "=": 4, "!=": 4, "<": 4, "<=": 4, ">": 4, ">=": 4,
         "+": 5, "-": 5, "*": 6, "/": 6, "%": 6}
_UNARY_PREC = 7
_ATOM_PREC = 9


def _prec(e: Any) -> int:
    if isinstance(e, Arith):
        return _PREC[e.op]
    if isinstance(e, Literal) and type(e.value) in (int, float) and str(_scalar(e.value)).startswith("-"):
        return _UNARY_PREC
    return _ATOM_PREC


def _scalar(v: Any) -> str:
    if v is True:
        return "true"
    if v is False:
        return "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    if isinstance(v, tuple):
        return "[" + ", ".join(_scalar(x) for x in v) + "]"
    raise TypeError(f"cannot format literal {v!r}")


def format_expr(e: Any) -> str:
    """Canonical text for an expression; ``parse(format_expr(e)) == e``."""
    if isinstance(e, Literal):
        return _scalar(e.value)
    if isinstance(e, (TableRef, Var)):
        return e.name
    if isinstance(e, FieldAccess):
        base = format_expr(e.base)
        if not isinstance(e.base, (TableRef, Var, FieldAccess, HelperCall, Transform)):
            base = f"({base})"
        return f"{base}.{e.label}"
    if isinstance(e, ListExpr):
        return "[" + ", ".join(format_expr(i) for i in e.items) + "]"
    if isinstance(e, Comprehension):
        return "[" + format_expr(e.head) + " | " + ", ".join(_format_qual(q) for q in e.qualifiers) + "]"
    if isinstance(e, Transform):
        out = e.name
        if e.args:
            out += "[" + "; ".join(", ".join(_format_targ(a) for a in g) for g in e.args) + "]"
        return out + "(" + ", ".join(format_expr(i) for i in e.inputs) + ")"
    if isinstance(e, HelperCall):
        return e.name + "(" + ", ".join(format_expr(a) for a in e.args) + ")"
    if isinstance(e, Arith):
        p = _PREC[e.op]
        if e.op == "not":
            (operand,) = e.operands
            inner = format_expr(operand)
            return f"not ({inner})" if _prec(operand) < p else f"not {inner}"
        left, right = e.operands
        ls, rs = format_expr(left), format_expr(right)
        if _prec(left) < p:
            ls = f"({ls})"
        if _prec(right) <= p:
            rs = f"({rs})"
        return f"{ls} {e.op} {rs}"
    raise TypeError(f"not an expression: {e!r}")


format = format_expr  # noqa: A001 - public name mirrors parse()


def _format_targ(a: Any) -> str:
    if isinstance(a, str):
        return a
    if isinstance(a, AttrStride):
        out = f"{a.attr}:{_scalar(a.stride)}"
        if a.origin is not None:
            out += f":{_scalar(a.origin)}"
        return out
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return _scalar(a)
    return format_expr(a)


def _format_qual(q: Any) -> str:
    if isinstance(q, Generator):
        return f"\\{q.var} <- {format_expr(q.source)}"
    if isinstance(q, Condition):
        return format_expr(q.expr)
    if isinstance(q, OrderBy):
        return "orderby " + ", ".join(f"{format_expr(k)} {d}" for k, d in q.keys)
    if isinstance(q, GroupBy):
        return "groupby " + format_expr(q.key)
    if isinstance(q, PartitionBy):
        return "partitionby " + ", ".join(f"{format_expr(k)} {_scalar(s)}" for k, s in q.pairs)
    if isinstance(q, Limit):
        return "limit " + format_expr(q.count)
    raise TypeError(f"not a qualifier: {q!r}")


def format_program(prog: Program) -> str:
    lines = [f"let {name} = {format_expr(e)}" for name, e in prog.bindings]
    lines.append(format_expr(prog.expr))
    return "\n".join(lines) + "\n"
