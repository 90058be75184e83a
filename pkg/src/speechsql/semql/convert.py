"""SQL <-> SemQL conversion.

``sql_to_actions`` parses the SQL subset, resolves names against a schema,
canonicalises condition order and emits the pre-order action list.
``actions_to_sql`` replays actions into a tree and renders canonical SQL
(uppercase keywords, ``T1``/``T2`` aliases when a scope joins tables).
"""

from __future__ import annotations

import re
from collections import deque

from ..errors import UnknownColumn, UnknownTable, UnsupportedSQL
from .grammar import MAX_R_DEPTH, Grammar, default_grammar
from .sqlparse import AggCol, BoolOp, ColRef, Cond, Literal, NotOp, Query, SelectCore, parse_sql
from .tree import ActionSequence, Node, build_tree, tree_actions

_NUMERIC = re.compile(r"^-?(\d+(\.\d*)?|\.\d+)$")


def normalize_literal(text: str) -> str:
    t = str(text).strip()
    if _NUMERIC.match(t):
        f = float(t)
        return str(int(f)) if f.is_integer() else repr(f)
    return t


def is_numeric(text: str) -> bool:
    return bool(_NUMERIC.match(str(text).strip()))


# ---------------------------------------------------------------- SQL -> tree


class _Scope:
    def __init__(self, core: SelectCore, schema):
        self.schema = schema
        self.tables: list[int] = []
        self.aliases: dict[str, int] = {}
        for name, alias in core.tables:
            tid = schema.table_id(name)
            if tid is None:
                raise UnknownTable(f"table {name!r} not in database {schema.db_id!r}")
            self.tables.append(tid)
            self.aliases[name.lower()] = tid
            if alias:
                self.aliases[alias.lower()] = tid

    def resolve(self, ref: ColRef) -> tuple[int, int]:
        s = self.schema
        cid = s.column_id(ref.column)
        if ref.qualifier is not None:
            tid = self.aliases.get(ref.qualifier.lower())
            if tid is None:
                raise UnknownTable(f"unknown table or alias {ref.qualifier!r}")
            if cid is None or not s.tables[tid].has_column(ref.column):
                raise UnknownColumn(f"table {s.tables[tid].name!r} has no column {ref.column!r}")
            return cid, tid
        if cid is None:
            raise UnknownColumn(f"column {ref.column!r} not in database {s.db_id!r}")
        owners = [t for t in dict.fromkeys(self.tables) if s.tables[t].has_column(ref.column)]
        if not owners:
            raise UnknownColumn(f"column {ref.column!r} not found in the FROM tables")
        if len(owners) > 1:
            raise UnsupportedSQL(f"ambiguous column {ref.column!r}; qualify it with a table alias")
        return cid, owners[0]


def _rule(grammar: Grammar, lhs: str, *rhs: str) -> int:
    r = grammar.find(lhs, rhs)
    if r is None:
        raise UnsupportedSQL(f"grammar has no production {lhs} := {' '.join(rhs)}")
    return r


def _slot(symbol: str, depth: int, value=None, literal=None) -> Node:
    return Node(symbol, depth, value=value, literal=literal)


def _a_node(ac: AggCol, scope: _Scope, g: Grammar, depth: int) -> Node:
    cid, tid = scope.resolve(ac.col)
    return Node("A", depth, _rule(g, "A", ac.agg, "C", "T"), [_slot("C", depth, cid), _slot("T", depth, tid)])


def _v_node(lit: Literal, depth: int) -> Node:
    return _slot("V", depth, literal=normalize_literal(lit.text))


def _filter(c, scope: _Scope, g: Grammar, depth: int, canonical: bool = True) -> Node:
    if isinstance(c, BoolOp):
        items = []
        stack = list(c.items)
        while stack:  # flatten nested chains of the same connective
            it = stack.pop(0)
            if isinstance(it, BoolOp) and it.op == c.op:
                stack[:0] = it.items
            else:
                items.append(_filter(it, scope, g, depth, canonical))
        if canonical:
            items.sort(key=lambda n: _sort_key(n, scope.schema, g))
        rule = _rule(g, "Filter", c.op, "Filter", "Filter")
        node = items[-1]
        for left in reversed(items[:-1]):
            node = Node("Filter", depth, rule, [left, node])
        return node
    if isinstance(c, NotOp):
        return Node("Filter", depth, _rule(g, "Filter", "not", "Filter"), [_filter(c.item, scope, g, depth, canonical)])
    assert isinstance(c, Cond)
    a = _a_node(c.left, scope, g, depth)
    if c.sub is not None:
        if depth + 1 > MAX_R_DEPTH:
            raise UnsupportedSQL("subqueries nested more than one level are not supported")
        if c.sub.set_op is not None:
            raise UnsupportedSQL("set operations inside subqueries are not supported")
        sub = _r_node(c.sub.left, scope.schema, g, depth + 1, canonical)
        return Node("Filter", depth, _rule(g, "Filter", c.op, "A", "R"), [a, sub])
    vs = [_v_node(v, depth) for v in c.values]
    rhs = ("A",) + ("V",) * len(vs)
    return Node("Filter", depth, _rule(g, "Filter", c.op, *rhs), [a, *vs])


def _r_node(core: SelectCore, schema, g: Grammar, depth: int, canonical: bool = True) -> Node:
    scope = _Scope(core, schema)
    if not 1 <= len(core.items) <= 3:
        raise UnsupportedSQL(f"SELECT with {len(core.items)} columns is not supported (1-3)")
    sel = Node("Select", depth, _rule(g, "Select", *["A"] * len(core.items)),
               [_a_node(ac, scope, g, depth) for ac in core.items])
    children, rhs = [sel], ["Select"]
    if core.where is not None:
        children.append(_filter(core.where, scope, g, depth, canonical))
        rhs.append("Filter")
    if core.order is not None:
        ac, direction = core.order
        kids = [_a_node(ac, scope, g, depth)]
        orhs = [direction, "A"]
        if core.limit is not None:
            kids.append(_v_node(core.limit, depth))
            orhs += ["limit", "V"]
        children.append(Node("Order", depth, _rule(g, "Order", *orhs), kids))
        rhs.append("Order")
    return Node("R", depth, _rule(g, "R", *rhs), children)


def query_to_tree(q: Query, schema, grammar: Grammar, canonical: bool = True) -> Node:
    """SemQL tree of a parsed query.

    With ``canonical`` the operands of AND/OR chains are sorted so that
    equivalent queries share one tree; otherwise they keep source order.
    """
    left = _r_node(q.left, schema, grammar, 1, canonical)
    if q.set_op is None:
        return Node("Z", 0, _rule(grammar, "Z", "R"), [left])
    right = _r_node(q.right, schema, grammar, 1, canonical)
    return Node("Z", 0, _rule(grammar, "Z", "R", q.set_op, "R"), [left, right])


def _first_column(n: Node, schema) -> str:
    if n.symbol == "C":
        return schema.column_names[n.value].lower()
    for c in n.children:
        name = _first_column(c, schema)
        if name:
            return name
    return ""


def _sort_key(n: Node, schema, g: Grammar):
    op = " ".join(g.productions[n.rule].keywords)
    return (_first_column(n, schema), op, signature(n, schema, g))


# ---------------------------------------------------------------- signatures


def signature(n: Node, schema, grammar: Grammar | None, values=None) -> str:
    """Canonical text of a subtree: lowercase identifiers, normalised literals."""
    grammar = grammar or default_grammar()
    if n.symbol == "C":
        return f"C:{schema.column_names[n.value].lower()}"
    if n.symbol == "T":
        return f"T:{schema.table_names[n.value].lower()}"
    if n.symbol == "V":
        lit = n.literal
        if lit is None and values is not None:
            lit = values[n.value]
        return f"V:{normalize_literal(lit)}"
    head = str(grammar.productions[n.rule])
    return "(" + " ".join([head] + [signature(c, schema, grammar, values) for c in n.children]) + ")"


# ---------------------------------------------------------------- public API


def sql_literals(sql: str, schema, grammar: Grammar | None = None) -> list[str]:
    """Distinct normalised literals of a query, in canonical pre-order."""
    grammar = grammar or default_grammar()
    tree = query_to_tree(parse_sql(sql), schema, grammar)
    out: list[str] = []

    def walk(n):
        if n.symbol == "V" and n.literal not in out:
            out.append(n.literal)
        for c in n.children:
            walk(c)

    walk(tree)
    return out


def sql_to_tree(sql: str, schema, grammar: Grammar | None = None) -> Node:
    return query_to_tree(parse_sql(sql), schema, grammar or default_grammar())


def sql_to_actions(sql: str, schema, grammar: Grammar | None = None, values=None) -> ActionSequence:
    grammar = grammar or default_grammar()
    tree = query_to_tree(parse_sql(sql), schema, grammar)
    if values is None:
        values = sql_literals(sql, schema, grammar)
    index = {}
    for i, v in enumerate(values):
        index.setdefault(normalize_literal(v), i)

    def assign(n):
        if n.symbol == "V":
            if n.literal not in index:
                raise UnsupportedSQL(f"literal {n.literal!r} is not among the candidate values")
            n.value = index[n.literal]
        for c in n.children:
            assign(c)

    assign(tree)
    return ActionSequence(tuple(tree_actions(tree)), tuple(values))


def actions_to_sql(actions, schema, grammar: Grammar | None = None, values=None) -> str:
    grammar = grammar or default_grammar()
    if values is None:
        values = actions.values if isinstance(actions, ActionSequence) else ()
    tree = build_tree(list(actions), schema, grammar, len(values))
    return render_sql(tree, schema, grammar, values)


# ---------------------------------------------------------------- rendering


def _quote(v: str) -> str:
    if is_numeric(v):
        return normalize_literal(v)
    return "'" + str(v).replace("'", "''") + "'"


def _scope_columns(n: Node, out: list):
    """(column, table) pairs of an R scope, not descending into subqueries."""
    if n.symbol == "A":
        out.append((n.children[0].value, n.children[1].value))
        return
    for c in n.children:
        if c.symbol != "R":
            _scope_columns(c, out)


def _fk_graph(schema) -> dict[int, list[tuple[int, str, str]]]:
    adj: dict[int, list] = {i: [] for i in range(schema.n_tables)}
    for fk in schema.foreign_keys:
        a, b = schema.table_id(fk.src_table), schema.table_id(fk.dst_table)
        if a == b:
            continue
        adj[a].append((b, fk.src_column, fk.dst_column))
        adj[b].append((a, fk.dst_column, fk.src_column))
    return adj


def _join_plan(tables: list[int], schema):
    """Order tables into a FROM list, adding bridge tables along FK paths.

    Returns [(table, on)] where ``on`` is (prev_table, prev_col, col) or None.
    """
    adj = _fk_graph(schema)
    plan = [(tables[0], None)]
    included = {tables[0]}
    for target in tables[1:]:
        if target in included:
            continue
        # BFS from the included set to the target
        prev = {t: None for t in included}
        q = deque(included)
        while q:
            u = q.popleft()
            if u == target:
                break
            for v, ucol, vcol in adj[u]:
                if v not in prev:
                    prev[v] = (u, ucol, vcol)
                    q.append(v)
        if target not in prev:
            plan.append((target, None))
            included.add(target)
            continue
        path = []
        v = target
        while prev[v] is not None:
            path.append((v, prev[v]))
            v = prev[v][0]
        for v, on in reversed(path):
            plan.append((v, on))
            included.add(v)
    return plan


class _Renderer:
    def __init__(self, schema, grammar: Grammar, values):
        self.schema = schema
        self.g = grammar
        self.values = values

    def kw(self, n: Node) -> tuple[str, ...]:
        return self.g.productions[n.rule].keywords

    def value(self, n: Node) -> str:
        lit = n.literal
        if lit is None:
            lit = self.values[n.value]
        return _quote(lit)

    def z(self, n: Node) -> str:
        parts = [self.r(n.children[0])]
        if len(n.children) > 1:
            parts += [self.kw(n)[0].upper(), self.r(n.children[1])]
        return " ".join(parts)

    def r(self, n: Node) -> str:
        s = self.schema
        cols: list = []
        _scope_columns(n, cols)
        tables = list(dict.fromkeys(t for _, t in cols))
        plan = _join_plan(tables, s)
        alias = {}
        if len(plan) > 1:
            alias = {t: f"T{i + 1}" for i, (t, _) in enumerate(plan)}
        from_parts = []
        for t, on in plan:
            name = s.tables[t].name
            if not alias:
                from_parts.append(name)
                continue
            piece = f"{name} AS {alias[t]}"
            if from_parts:
                piece = "JOIN " + piece
                if on is not None:
                    pt, pcol, col = on
                    piece += f" ON {alias[pt]}.{pcol} = {alias[t]}.{col}"
            from_parts.append(piece)
        self.alias = alias
        sel = next(c for c in n.children if c.symbol == "Select")
        out = "SELECT " + ", ".join(self.a(a) for a in sel.children) + " FROM " + " ".join(from_parts)
        flt = next((c for c in n.children if c.symbol == "Filter"), None)
        order = next((c for c in n.children if c.symbol == "Order"), None)
        if flt is not None:
            out += " WHERE " + self.filter(flt)
        if order is not None:
            kws = self.kw(order)
            out += f" ORDER BY {self.a(order.children[0])} {kws[0].upper()}"
            if "limit" in kws:
                out += f" LIMIT {self.value(order.children[1])}"
        return out

    def a(self, n: Node) -> str:
        agg = self.kw(n)[0]
        col_id, tid = n.children[0].value, n.children[1].value
        table = self.schema.tables[tid]
        key = self.schema.column_names[col_id].lower()
        col = next(c.name for c in table.columns if c.name.lower() == key)
        ref = f"{self.alias[tid]}.{col}" if self.alias else col
        return ref if agg == "none" else f"{agg.upper()}({ref})"

    def filter(self, n: Node, parent: str | None = None) -> str:
        op = self.kw(n)[0]
        if op in ("and", "or"):
            text = f" {op.upper()} ".join(self.filter(c, op) for c in n.children)
            return f"({text})" if parent is not None and parent != op else text
        if op == "not":
            return f"NOT ({self.filter(n.children[0], 'not')})"
        left = self.a(n.children[0])
        rest = n.children[1:]
        if rest and rest[0].symbol == "R":
            saved = self.alias
            sub = self.r(rest[0])
            self.alias = saved
            word = {"in": "IN", "not_in": "NOT IN"}.get(op, op)
            return f"{left} {word} ({sub})"
        if op == "between":
            return f"{left} BETWEEN {self.value(rest[0])} AND {self.value(rest[1])}"
        if op == "like":
            return f"{left} LIKE {self.value(rest[0])}"
        return f"{left} {op} {self.value(rest[0])}"


def render_sql(tree: Node, schema, grammar: Grammar | None = None, values=()) -> str:
    return _Renderer(schema, grammar or default_grammar(), values).z(tree)
