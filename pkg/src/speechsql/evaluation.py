"""Query-match accuracy, word error rate and per-query timing."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import EmptyReference, SpeechSQLError
from .semql import default_grammar, signature, sql_to_tree
from .semql.grammar import Grammar

PARTS = ("select_columns", "aggregators", "conditions", "structure")


@dataclass
class MatchReport:
    exact: bool
    parts: dict[str, bool]


@dataclass
class WERReport:
    wer: float
    S: int
    D: int
    I: int
    T: int


@dataclass
class TPQReport:
    mean_seconds: float
    n_queries: int


def decompose(sql: str, schema, grammar: Grammar | None = None) -> dict:
    """Split a query into the four compared parts (canonical, case-folded)."""
    g = grammar or default_grammar()
    tree = sql_to_tree(sql, schema, g)
    rs = [c for c in tree.children if c.symbol == "R"]
    sel_cols, aggs, conds, structure = [], [], [], [str(g.productions[tree.rule])]
    for r in rs:
        sel = next(c for c in r.children if c.symbol == "Select")
        sel_cols.append(tuple(signature(a.children[0], schema, g) + "@" + signature(a.children[1], schema, g)
                              for a in sel.children))
        aggs.append(tuple(g.productions[a.rule].keywords[0] for a in sel.children))
        flt = next((c for c in r.children if c.symbol == "Filter"), None)
        conds.append(None if flt is None else signature(flt, schema, g))
        order = next((c for c in r.children if c.symbol == "Order"), None)
        structure.append((str(g.productions[r.rule]), str(g.productions[sel.rule]),
                          None if order is None else signature(order, schema, g)))
    return {"select_columns": sel_cols, "aggregators": aggs, "conditions": conds, "structure": structure}


def query_match(pred_sql: str, gold_sql: str, schema, grammar: Grammar | None = None) -> MatchReport:
    """Compare two queries part by part; unparseable predictions simply mismatch."""
    gold = decompose(gold_sql, schema, grammar)
    try:
        pred = decompose(pred_sql, schema, grammar)
    except SpeechSQLError:
        return MatchReport(False, {p: False for p in PARTS})
    parts = {p: pred[p] == gold[p] for p in PARTS}
    return MatchReport(all(parts.values()), parts)


def wer(ref: Sequence[str], hyp: Sequence[str]) -> WERReport:
    """Levenshtein alignment with unit costs; ties resolved toward substitution."""
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise EmptyReference("reference transcript is empty")
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i][j] = min(sub, d[i - 1][j] + 1, d[i][j - 1] + 1)
    S = D = I = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return WERReport((S + D + I) / n, S, D, I, n)


@dataclass
class EvalResult:
    query_acc: float
    part_acc: dict[str, float]
    tpq: TPQReport
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "query_acc": self.query_acc,
            "part_acc": self.part_acc,
            "tpq_seconds": self.tpq.mean_seconds,
            "n_queries": self.tpq.n_queries,
        }


def score_predictions(pairs, schemas, grammar: Grammar | None = None, seconds=None) -> EvalResult:
    """Score ``(id, db_id, pred_sql, gold_sql)`` tuples; ``seconds`` aligns with ``pairs``."""
    rows = []
    hits = 0
    part_hits = {p: 0 for p in PARTS}
    seconds = list(seconds) if seconds is not None else [0.0] * len(pairs)
    for (iid, db_id, pred, gold), sec in zip(pairs, seconds):
        rep = query_match(pred, gold, schemas[db_id], grammar)
        hits += rep.exact
        for p in PARTS:
            part_hits[p] += rep.parts[p]
        rows.append({"id": iid, "pred_sql": pred, "gold_sql": gold, "exact": rep.exact,
                     "parts": ";".join(f"{p}={int(rep.parts[p])}" for p in PARTS), "seconds": sec})
    n = max(len(pairs), 1)
    tpq = TPQReport(sum(seconds) / n, len(pairs))
    return EvalResult(hits / n, {p: part_hits[p] / n for p in PARTS}, tpq, rows)


def evaluate(model, instances, schemas, grammar: Grammar | None = None, max_steps: int = 40) -> EvalResult:
    """Greedy-decode each instance, time the decode and score it with ``query_match``."""
    from .errors import MaxStepsExceeded

    pairs, secs = [], []
    for inst in instances:
        t0 = time.perf_counter()
        try:
            pred = model.predict_sql(inst, schemas[inst.db_id], max_steps=max_steps)
        except MaxStepsExceeded:
            pred = ""
        secs.append(time.perf_counter() - t0)
        pairs.append((inst.id, inst.db_id, pred, inst.gold_sql))
    return score_predictions(pairs, schemas, grammar, secs)


def write_report(result: EvalResult, out_dir, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = result.summary() | (extra or {})
    (out / "eval_report.json").write_text(json.dumps(summary, indent=2))
    with open(out / "eval_details.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "pred_sql", "gold_sql", "exact", "parts", "seconds"])
        w.writeheader()
        w.writerows(result.rows)


def action_pattern(actions) -> tuple:
    """Rule sequence with schema and value picks reduced to their family."""
    return tuple(a.index if a.kind == "rule" else a.kind for a in actions)


def majority_pattern_baseline(train, test) -> float:
    """Held-out share of the most frequent training pattern.

    Counts an instance as correct whenever its gold pattern equals the
    majority training pattern, i.e. as if every slot were filled correctly,
    so no predictor that always emits that pattern can score higher.
    """
    from collections import Counter

    if not train or not test:
        raise ValueError("baseline needs non-empty train and test sets")
    counts = Counter(action_pattern(i.gold_actions) for i in train)
    # ties broken by first occurrence so the choice is deterministic
    top = max(counts.values())
    majority = next(p for p in (action_pattern(i.gold_actions) for i in train) if counts[p] == top)
    return sum(action_pattern(i.gold_actions) == majority for i in test) / len(test)
