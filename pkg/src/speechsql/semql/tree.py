"""Actions, derivation trees and the legality mask used by the decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import IllegalAction, IncompleteDerivation
from .grammar import MAX_R_DEPTH, START, Grammar

RULE, COLUMN, TABLE, VALUE = "rule", "column", "table", "value"
SLOT_KIND = {"C": COLUMN, "T": TABLE, "V": VALUE}
DEFAULT_MAX_STEPS = 40


@dataclass(frozen=True)
class Action:
    kind: str
    index: int

    def __repr__(self):
        return f"{self.kind}:{self.index}"


def ApplyRule(i: int) -> Action:
    return Action(RULE, int(i))


def SelectColumn(i: int) -> Action:
    return Action(COLUMN, int(i))


def SelectTable(i: int) -> Action:
    return Action(TABLE, int(i))


def SelectValue(i: int) -> Action:
    return Action(VALUE, int(i))


@dataclass(frozen=True)
class ActionSequence:
    """Pre-order action list plus the candidate values ``SelectValue`` indexes."""

    actions: tuple[Action, ...]
    values: tuple[str, ...] = ()

    def __iter__(self):
        return iter(self.actions)

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, i):
        return self.actions[i]


@dataclass
class Node:
    symbol: str
    depth: int = 0
    rule: int | None = None
    children: list["Node"] = field(default_factory=list)
    value: int | None = None
    literal: str | None = None

    @property
    def complete(self) -> bool:
        if self.symbol in SLOT_KIND:
            return self.value is not None
        return self.rule is not None and all(c.complete for c in self.children)


@dataclass(frozen=True)
class ActionSpace:
    """Offsets of the four action families in the flat legality mask."""

    n_rules: int
    n_columns: int
    n_tables: int
    n_values: int

    @property
    def size(self) -> int:
        return self.n_rules + self.n_columns + self.n_tables + self.n_values

    def offset(self, kind: str) -> int:
        return {
            RULE: 0,
            COLUMN: self.n_rules,
            TABLE: self.n_rules + self.n_columns,
            VALUE: self.n_rules + self.n_columns + self.n_tables,
        }[kind]

    def width(self, kind: str) -> int:
        return {RULE: self.n_rules, COLUMN: self.n_columns, TABLE: self.n_tables, VALUE: self.n_values}[kind]

    def flat(self, a: Action) -> int:
        return self.offset(a.kind) + a.index

    def unflat(self, i: int) -> Action:
        for kind in (RULE, COLUMN, TABLE, VALUE):
            if i < self.offset(kind) + self.width(kind):
                return Action(kind, i - self.offset(kind))
        raise IndexError(i)


class DerivationState:
    """Partial SemQL tree with a pre-order frontier stack.

    ``max_steps`` bounds the whole derivation: a rule is legal only if the
    cheapest completion of the resulting frontier still fits, so any walk
    that follows the mask finishes within the cap.  ``None`` disables it.
    """

    def __init__(self, grammar: Grammar, schema, n_values: int, max_steps: int | None = DEFAULT_MAX_STEPS):
        self.grammar = grammar
        self.schema = schema
        self.n_values = n_values
        self.max_steps = max_steps
        self.root = Node(START, depth=0)
        self.frontier: list[Node] = [self.root]
        self.actions: list[Action] = []
        self.last_column: int | None = None
        self.space = ActionSpace(grammar.n_rules, schema.n_columns, schema.n_tables, n_values)

    def copy(self) -> "DerivationState":
        # trees are rebuilt by replay; cheap enough for the sizes involved
        return replay(self.actions, self.schema, self.grammar, self.n_values, self.max_steps)

    @property
    def complete(self) -> bool:
        return not self.frontier

    @property
    def steps(self) -> int:
        return len(self.actions)

    @property
    def frontier_symbol(self) -> str | None:
        return self.frontier[-1].symbol if self.frontier else None

    @property
    def frontier_kind(self) -> str | None:
        sym = self.frontier_symbol
        if sym is None:
            return None
        return SLOT_KIND.get(sym, RULE)

    def _rest_cost(self) -> float:
        hv = self.n_values > 0
        return sum(self.grammar.min_cost(n.symbol, n.depth, hv) for n in self.frontier[:-1])

    def legal_rules(self) -> list[int]:
        node = self.frontier[-1]
        hv = self.n_values > 0
        budget = math.inf if self.max_steps is None else self.max_steps - self.steps - self._rest_cost()
        out = []
        for r in self.grammar.rules_for(node.symbol):
            cost = self.grammar.expansion_cost(r, node.depth, hv)
            if cost < math.inf and cost <= budget:
                out.append(r)
        return out

    def legal_mask(self) -> np.ndarray:
        mask = np.zeros(self.space.size, dtype=bool)
        kind = self.frontier_kind
        if kind is None:
            return mask
        off = self.space.offset(kind)
        if kind == RULE:
            mask[[off + r for r in self.legal_rules()]] = True
        elif kind == COLUMN:
            mask[off : off + self.space.n_columns] = True
        elif kind == TABLE:
            mask[[off + t for t in self.schema.tables_with_column[self.last_column]]] = True
        else:
            mask[off : off + self.n_values] = True
        return mask

    def legal_indices(self) -> list[int]:
        """Legal indices within the current frontier's action family."""
        kind = self.frontier_kind
        if kind is None:
            return []
        if kind == RULE:
            return self.legal_rules()
        if kind == COLUMN:
            return list(range(self.schema.n_columns))
        if kind == TABLE:
            return list(self.schema.tables_with_column[self.last_column])
        return list(range(self.n_values))

    def apply(self, action: Action) -> "DerivationState":
        step = self.steps
        kind = self.frontier_kind
        if kind is None:
            raise IllegalAction("derivation is already complete", step)
        if action.kind != kind:
            raise IllegalAction(f"frontier {self.frontier_symbol} expects a {kind} action, got {action}", step)
        if action.index not in self.legal_indices():
            if kind == TABLE:
                col = self.schema.column_names[self.last_column]
                raise IllegalAction(f"table {action.index} does not contain column {col!r}", step)
            raise IllegalAction(f"{action} is not legal here", step)
        node = self.frontier.pop()
        if kind == RULE:
            node.rule = action.index
            prod = self.grammar.productions[action.index]
            node.children = [Node(s, self.grammar.child_depth(s, node.depth)) for s in prod.children]
            for child in reversed(node.children):
                if child.depth > MAX_R_DEPTH:
                    raise IllegalAction("subquery nesting too deep", step)
                self.frontier.append(child)
        else:
            node.value = action.index
            if kind == COLUMN:
                self.last_column = action.index
        self.actions.append(action)
        return self


def replay(actions: Iterable[Action], schema, grammar: Grammar, n_values: int, max_steps=None) -> DerivationState:
    state = DerivationState(grammar, schema, n_values, max_steps)
    for a in actions:
        state.apply(a)
    return state


def build_tree(seq: ActionSequence | Sequence[Action], schema, grammar: Grammar, n_values: int | None = None) -> Node:
    if n_values is None:
        n_values = len(seq.values) if isinstance(seq, ActionSequence) else 0
    state = replay(seq, schema, grammar, n_values)
    if not state.complete:
        raise IncompleteDerivation(
            f"{len(state.frontier)} unexpanded nonterminal(s) after {state.steps} actions; next is {state.frontier_symbol}"
        )
    return state.root


def legal_actions(state: DerivationState, schema=None, n_candidates: int | None = None) -> np.ndarray:
    """Flat boolean mask over [rules | columns | tables | values]."""
    return state.legal_mask()


def tree_actions(node: Node) -> list[Action]:
    """Pre-order action list of a complete tree."""
    out = []

    def walk(n: Node):
        if n.symbol in SLOT_KIND:
            out.append(Action(SLOT_KIND[n.symbol], n.value))
            return
        out.append(ApplyRule(n.rule))
        for c in n.children:
            walk(c)

    walk(node)
    return out
