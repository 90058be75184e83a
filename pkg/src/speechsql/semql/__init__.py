"""SemQL grammar, derivation trees and SQL conversion."""

from .convert import actions_to_sql, normalize_literal, render_sql, signature, sql_literals, sql_to_actions, sql_to_tree
from .grammar import Grammar, Production, default_grammar, load_grammar, parse_grammar
from .tree import (
    COLUMN,
    RULE,
    TABLE,
    VALUE,
    Action,
    ActionSequence,
    ActionSpace,
    ApplyRule,
    DerivationState,
    Node,
    SelectColumn,
    SelectTable,
    SelectValue,
    build_tree,
    legal_actions,
    replay,
    tree_actions,
)
