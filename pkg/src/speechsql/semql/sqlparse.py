"""Tokenizer and recursive-descent parser for the supported SQL subset.

The parser is schema-free: it produces a small AST of column references,
conditions and select cores.  Name resolution happens in ``convert``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..errors import UnsupportedSQL

AGGS = ("max", "min", "count", "sum", "avg")
COMPARISONS = ("=", "!=", "<", ">", "<=", ">=")
SET_OPS = ("union", "intersect", "except")
_UNSUPPORTED_KW = {"group", "having", "distinct", "offset", "case", "exists", "is", "null", "outer", "left", "right"}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>'(?:[^']|'')*'|"(?:[^"]|"")*")
  | (?P<number>\d+(?:\.\d+)?|\.\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*|`[^`]+`)
  | (?P<op><=|>=|!=|<>|=|<|>)
  | (?P<punct>[(),.*;\-])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Tok:
    kind: str
    text: str
    pos: int

    @property
    def low(self) -> str:
        return self.text.lower()


def tokenize(sql: str) -> list[Tok]:
    out, pos = [], 0
    while pos < len(sql):
        m = _TOKEN_RE.match(sql, pos)
        if not m:
            raise UnsupportedSQL(f"unexpected character {sql[pos]!r} at offset {pos}")
        kind = m.lastgroup
        text = m.group()
        if kind == "string":
            q = text[0]
            text = text[1:-1].replace(q * 2, q)
        elif kind == "ident" and text.startswith("`"):
            text = text[1:-1]
        elif kind == "op" and text == "<>":
            text = "!="
        if kind != "ws":
            out.append(Tok(kind, text, m.start()))
        pos = m.end()
    return out


@dataclass(frozen=True)
class Literal:
    text: str
    is_string: bool = False


@dataclass(frozen=True)
class ColRef:
    qualifier: str | None
    column: str


@dataclass(frozen=True)
class AggCol:
    agg: str  # 'none' or one of AGGS
    col: ColRef


@dataclass
class Cond:
    op: str  # comparison, 'like', 'between', 'in', 'not_in'
    left: AggCol
    values: list[Literal] = field(default_factory=list)
    sub: "Query | None" = None


@dataclass
class BoolOp:
    op: str  # 'and' | 'or'
    items: list


@dataclass
class NotOp:
    item: object


@dataclass
class SelectCore:
    items: list[AggCol]
    tables: list[tuple[str, str | None]]  # (table name, alias)
    where: object = None
    order: tuple[AggCol, str] | None = None
    limit: Literal | None = None
    # columns of JOIN ... ON equalities; SemQL infers joins, so these carry no actions
    join_columns: list[ColRef] = field(default_factory=list)


@dataclass
class Query:
    left: SelectCore
    set_op: str | None = None
    right: SelectCore | None = None


class _Parser:
    def __init__(self, sql: str):
        self.sql = sql
        self.toks = tokenize(sql)
        self.i = 0

    # -- token helpers
    def peek(self, k: int = 0) -> Tok | None:
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def at(self, *words: str, k: int = 0) -> bool:
        t = self.peek(k)
        return t is not None and t.kind in ("ident", "op", "punct") and t.low in words

    def take(self, *words: str) -> Tok:
        t = self.peek()
        if t is None or (words and t.low not in words):
            want = "/".join(words) if words else "token"
            got = "end of input" if t is None else repr(t.text)
            raise UnsupportedSQL(f"expected {want}, got {got} in {self.sql!r}")
        self.i += 1
        return t

    def fail(self, what: str):
        t = self.peek()
        where = "end of input" if t is None else f"{t.text!r} at offset {t.pos}"
        raise UnsupportedSQL(f"{what} ({where}) in {self.sql!r}")

    # -- grammar
    def query(self, nested: bool = False) -> Query:
        left = self.core()
        q = Query(left)
        if self.at(*SET_OPS):
            q.set_op = self.take().low
            if self.at("all"):
                self.fail("set operation ALL is not supported")
            q.right = self.core()
            if q.left.order or q.right.order:
                raise UnsupportedSQL("ORDER BY combined with a set operation is not supported")
        if not nested:
            if self.at(";"):
                self.take()
            if self.peek() is not None:
                self.fail("unexpected trailing input")
        return q

    def core(self) -> SelectCore:
        self.take("select")
        if self.at("distinct", "all"):
            self.fail("DISTINCT is not supported")
        items = [self.aggcol()]
        while self.at(","):
            self.take()
            items.append(self.aggcol())
        self.take("from")
        joins: list[ColRef] = []
        tables = self.from_clause(joins)
        core = SelectCore(items, tables, join_columns=joins)
        if self.at("where"):
            self.take()
            core.where = self.cond()
        if self.at("group", "having"):
            self.fail("GROUP BY / HAVING are not supported")
        if self.at("order"):
            self.take()
            self.take("by")
            ac = self.aggcol()
            direction = "asc"
            if self.at("asc", "desc"):
                direction = self.take().low
            if self.at(","):
                self.fail("ORDER BY supports a single key")
            core.order = (ac, direction)
        if self.at("limit"):
            self.take()
            if core.order is None:
                self.fail("LIMIT without ORDER BY is not supported")
            core.limit = self.literal()
        return core

    def from_clause(self, joins: list):
        tables = [self.table_ref()]
        while self.at("join", "inner", ","):
            if self.take().low == "inner":
                self.take("join")
            tables.append(self.table_ref())
            if self.at("on"):
                self.take()
                joins.extend(self.join_condition())
        return tables

    def table_ref(self):
        t = self.peek()
        if t is not None and t.text == "(":
            self.fail("subqueries in FROM are not supported")
        if t is None or t.kind != "ident" or t.low in _UNSUPPORTED_KW or t.low == "select":
            self.fail("expected a table name")
        self.i += 1
        alias = None
        if self.at("as"):
            self.take()
            alias = self.take().text
        elif self.peek() is not None and self.peek().kind == "ident" and self.peek().low not in _CLAUSE_WORDS:
            alias = self.take().text
        return (t.text, alias)

    def join_condition(self) -> list[ColRef]:
        cols = [self.colref()]
        self.take("=")
        cols.append(self.colref())
        while self.at("and") and self._looks_like_join_eq():
            self.take()
            cols.append(self.colref())
            self.take("=")
            cols.append(self.colref())
        return cols

    def _looks_like_join_eq(self) -> bool:
        # "AND a.x = b.y" continues ON; anything else ends it
        save = self.i
        try:
            self.i += 1
            self.colref()
            if not self.at("="):
                return False
            self.i += 1
            t = self.peek()
            return t is not None and t.kind == "ident" and t.low not in _CLAUSE_WORDS
        except UnsupportedSQL:
            return False
        finally:
            self.i = save

    def colref(self) -> ColRef:
        t = self.peek()
        if t is not None and t.text == "*":
            self.fail("'*' columns are not supported")
        if t is None or t.kind != "ident":
            self.fail("expected a column")
        self.i += 1
        if self.at("."):
            self.take()
            c = self.peek()
            if c is not None and c.text == "*":
                self.fail("'*' columns are not supported")
            if c is None or c.kind != "ident":
                self.fail("expected a column after '.'")
            self.i += 1
            return ColRef(t.text, c.text)
        return ColRef(None, t.text)

    def aggcol(self) -> AggCol:
        if self.at(*AGGS) and self.at("(", k=1):
            agg = self.take().low
            self.take("(")
            if self.at("distinct"):
                self.fail("DISTINCT inside aggregates is not supported")
            col = self.colref()
            self.take(")")
            return AggCol(agg, col)
        return AggCol("none", self.colref())

    def literal(self) -> Literal:
        t = self.peek()
        neg = False
        if t is not None and t.text == "-":
            neg = True
            self.i += 1
            t = self.peek()
        if t is None or t.kind not in ("number", "string"):
            self.fail("expected a literal value")
        self.i += 1
        if t.kind == "string":
            if neg:
                self.fail("negated string literal")
            return Literal(t.text, True)
        return Literal(("-" if neg else "") + t.text)

    def cond(self):
        items = [self.cond_and()]
        while self.at("or"):
            self.take()
            items.append(self.cond_and())
        return items[0] if len(items) == 1 else BoolOp("or", items)

    def cond_and(self):
        items = [self.cond_not()]
        while self.at("and"):
            self.take()
            items.append(self.cond_not())
        return items[0] if len(items) == 1 else BoolOp("and", items)

    def cond_not(self):
        if self.at("not"):
            self.take()
            return NotOp(self.cond_not())
        if self.at("(") and not self.at("select", k=1):
            self.take()
            c = self.cond()
            self.take(")")
            return c
        return self.predicate()

    def predicate(self):
        left = self.aggcol()
        if self.at("not"):
            self.take()
            if self.at("in"):
                self.take()
                return Cond("not_in", left, sub=self.subquery())
            if self.at("like"):
                self.take()
                return NotOp(Cond("like", left, [self.literal()]))
            self.fail("expected IN or LIKE after NOT")
        if self.at("in"):
            self.take()
            return Cond("in", left, sub=self.subquery())
        if self.at("like"):
            self.take()
            return Cond("like", left, [self.literal()])
        if self.at("between"):
            self.take()
            lo = self.literal()
            self.take("and")
            return Cond("between", left, [lo, self.literal()])
        t = self.peek()
        if t is None or t.kind != "op":
            self.fail("expected a comparison operator")
        op = self.take().text
        if self.at("(") and self.at("select", k=1):
            return Cond(op, left, sub=self.subquery())
        nxt = self.peek()
        if nxt is not None and nxt.kind == "ident":
            self.fail("column-to-column comparisons are not supported")
        return Cond(op, left, [self.literal()])

    def subquery(self) -> Query:
        self.take("(")
        if not self.at("select"):
            self.fail("IN lists are not supported; expected a subquery")
        q = self.query(nested=True)
        self.take(")")
        return q


_CLAUSE_WORDS = {
    "where", "order", "limit", "join", "inner", "on", "group", "having",
    "union", "intersect", "except", "as", "and", "or", "left", "right", "outer",
}


def parse_sql(sql: str) -> Query:
    if not sql or not sql.strip():
        raise UnsupportedSQL("empty SQL")
    return _Parser(sql).query()
