"""SemQL grammar loading and derived tables (rule lookup, minimum costs)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from ..errors import EmptyGrammar, UnknownSymbol

NONTERMINALS = ("Z", "R", "Select", "Order", "A", "Filter", "C", "T", "V")
SLOTS = ("C", "T", "V")
KEYWORDS = frozenset(
    "union intersect except asc desc limit none max min count sum avg "
    "and or not = != < > <= >= like between in not_in".split()
)
START = "Z"
# R nested under R counts as a subquery; depth 2 allows one level.
MAX_R_DEPTH = 2


@dataclass(frozen=True)
class Production:
    id: int
    lhs: str
    rhs: tuple[str, ...]

    @property
    def children(self) -> tuple[str, ...]:
        return tuple(s for s in self.rhs if s in NONTERMINALS)

    @property
    def keywords(self) -> tuple[str, ...]:
        return tuple(s for s in self.rhs if s not in NONTERMINALS)

    def __str__(self):
        return f"{self.lhs} := {' '.join(self.rhs)}"


@dataclass(frozen=True, eq=False)
class Grammar:
    productions: tuple[Production, ...]
    nonterminals: tuple[str, ...] = NONTERMINALS
    _index: dict = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {(p.lhs, p.rhs): p.id for p in self.productions})

    @property
    def n_rules(self) -> int:
        return len(self.productions)

    def find(self, lhs: str, rhs) -> int | None:
        return self._index.get((lhs, tuple(rhs)))

    def rules_for(self, lhs: str) -> list[int]:
        return [p.id for p in self.productions if p.lhs == lhs]

    def child_depth(self, symbol: str, depth: int) -> int:
        return depth + 1 if symbol == "R" else depth

    def min_cost(self, symbol: str, depth: int, has_values: bool) -> float:
        return _min_costs(self, has_values).get((symbol, depth), math.inf)

    def expansion_cost(self, rule_id: int, depth: int, has_values: bool) -> float:
        """Actions needed to finish a node after applying ``rule_id`` to it (inf if banned)."""
        return _expansion(self, self.productions[rule_id], depth, _min_costs(self, has_values))


@lru_cache(maxsize=None)
def _min_costs(g: Grammar, has_values: bool) -> dict:
    cost = {}
    for d in range(MAX_R_DEPTH + 1):
        cost[("C", d)] = 1.0
        cost[("T", d)] = 1.0
        cost[("V", d)] = 1.0 if has_values else math.inf
    changed = True
    while changed:
        changed = False
        for p in g.productions:
            for d in range(MAX_R_DEPTH + 1):
                if p.lhs == "R" and d == 0:
                    continue
                c = _expansion(g, p, d, cost)
                if c < cost.get((p.lhs, d), math.inf):
                    cost[(p.lhs, d)] = c
                    changed = True
    return cost


def _expansion(g, p, d, cost):
    total = 1.0
    for s in p.children:
        cd = g.child_depth(s, d)
        if cd > MAX_R_DEPTH:
            return math.inf
        total += cost.get((s, cd), math.inf)
    return total


def parse_grammar(text: str) -> Grammar:
    prods = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":=" not in line:
            raise UnknownSymbol(f"line {lineno}: expected 'LHS := symbols', got {raw!r}")
        lhs, rhs = (part.strip() for part in line.split(":=", 1))
        symbols = tuple(rhs.split())
        if lhs not in NONTERMINALS or lhs in SLOTS:
            raise UnknownSymbol(f"line {lineno}: {lhs!r} is not an expandable nonterminal")
        if not symbols:
            raise UnknownSymbol(f"line {lineno}: empty right-hand side")
        for s in symbols:
            if s not in NONTERMINALS and s not in KEYWORDS:
                raise UnknownSymbol(f"line {lineno}: undefined symbol {s!r}")
        prods.append(Production(len(prods), lhs, symbols))
    if not prods:
        raise EmptyGrammar("grammar has no productions")
    defined = {p.lhs for p in prods}
    if START not in defined:
        raise EmptyGrammar(f"start symbol {START} has no productions")
    # every nonterminal reachable from Z needs at least one production
    todo, seen = [START], set()
    while todo:
        sym = todo.pop()
        if sym in seen or sym in SLOTS:
            continue
        seen.add(sym)
        if sym not in defined:
            raise EmptyGrammar(f"nonterminal {sym} has no productions")
        for p in prods:
            if p.lhs == sym:
                todo.extend(p.children)
    return Grammar(tuple(prods))


def load_grammar(source=None) -> Grammar:
    """Parse grammar text, a path to a grammar file, or (``None``) the shipped grammar."""
    if source is None:
        text = resources.files(__package__).joinpath("grammar.txt").read_text(encoding="utf-8")
    elif "\n" in str(source) or ":=" in str(source):
        text = str(source)
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    return parse_grammar(text)


@lru_cache(maxsize=1)
def default_grammar() -> Grammar:
    return load_grammar()
