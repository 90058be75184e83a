import json
import random

import numpy as np
import pytest

from oracles import all_words, exhaustive_edit_distances, recursive_edit_distance
from speechsql.errors import EmptyReference
from speechsql.evaluation import EvalResult, query_match, score_predictions, wer, write_report


def brute_force_edit_distance(ref, hyp):
    codes = {w: i for i, w in enumerate(dict.fromkeys(list(ref) + list(hyp)))}
    r = np.array([[codes[w] for w in ref]], dtype=np.int64).reshape(1, len(ref))
    h = np.array([[codes[w] for w in hyp]], dtype=np.int64).reshape(1, len(hyp))
    return int(exhaustive_edit_distances(r, h)[0, 0])


def test_wer_matches_exhaustive_oracle():
    # every pair of sequences of length <= 5 over a 3-word alphabet
    words = ["a", "b", "c"]
    for n in range(1, 6):
        refs = all_words(3, n)
        for m in range(0, 6):
            hyps = all_words(3, m)
            oracle = exhaustive_edit_distances(refs, hyps)
            for ri, r in enumerate(refs):
                rw = [words[x] for x in r]
                for hi, h in enumerate(hyps):
                    rep = wer(rw, [words[x] for x in h])
                    assert rep.S + rep.D + rep.I == oracle[ri, hi]
                    assert rep.wer == oracle[ri, hi] / n


def test_wer_deletion_case():
    rep = wer("a b c".split(), "a c".split())
    assert (rep.S, rep.D, rep.I) == (0, 1, 0)
    assert rep.wer == pytest.approx(1 / 3)


def test_wer_table5_pair():
    ref = "what is the lowest number of draws with more than 1 byes".split()
    hyp = "what is the lowest number of drawers with more than one bites".split()
    rep = wer(ref, hyp)
    assert recursive_edit_distance(ref, hyp) == 3
    assert rep.S == 3 and rep.D == 0 and rep.I == 0
    assert rep.wer == pytest.approx(3 / 12)


def test_wer_identity_and_empty_hyp():
    assert wer(["x", "y"], ["x", "y"]).wer == 0
    assert wer(["x", "y"], []).wer == 1.0


def test_wer_empty_reference():
    with pytest.raises(EmptyReference):
        wer([], ["a"])


def test_wer_prefers_substitution():
    rep = wer(["a"], ["b"])
    assert (rep.S, rep.D, rep.I) == (1, 0, 0)


def test_query_match_reflexive_and_order(wimmera):
    q = "SELECT wins FROM wimmera WHERE byes = 1 AND draws = 2"
    assert query_match(q, q, wimmera).exact
    assert query_match("SELECT wins FROM wimmera WHERE draws = 2 AND byes = 1", q, wimmera).exact


def test_query_match_aggregator(wimmera):
    rep = query_match("SELECT MAX(draws) FROM wimmera", "SELECT MIN(draws) FROM wimmera", wimmera)
    assert not rep.exact
    assert rep.parts == {"select_columns": True, "aggregators": False, "conditions": True, "structure": True}


def test_query_match_normalises(wimmera):
    assert query_match("select WINS from WIMMERA where byes > 1.0", "SELECT wins FROM wimmera WHERE byes > 1",
                       wimmera).exact


def test_query_match_unparseable(wimmera):
    rep = query_match("SELEKT garbage", "SELECT wins FROM wimmera", wimmera)
    assert not rep.exact and not any(rep.parts.values())


def test_query_match_condition_part(wimmera):
    rep = query_match("SELECT wins FROM wimmera WHERE byes > 2", "SELECT wins FROM wimmera WHERE byes > 1", wimmera)
    assert not rep.exact and not rep.parts["conditions"] and rep.parts["select_columns"]


def test_query_match_permutation_property(schemas):
    rng = random.Random(3)
    s = schemas["wimmera"]
    cols = ["wins", "byes", "losses", "draws", "against"]
    for _ in range(100):
        conds = [f"{c} {rng.choice(['=', '>', '<', '!='])} {rng.randint(0, 9)}" for c in rng.sample(cols, 3)]
        joiner = rng.choice([" AND ", " OR "])
        q = f"SELECT {rng.choice(cols)} FROM wimmera WHERE " + joiner.join(conds)
        shuffled = conds[:]
        rng.shuffle(shuffled)
        q2 = q.split(" WHERE ")[0] + " WHERE " + joiner.join(shuffled)
        assert query_match(q, q, s).exact
        assert query_match(q2, q, s).exact


def test_score_and_report(tmp_path, wimmera):
    pairs = [("a", "wimmera", "SELECT wins FROM wimmera", "SELECT wins FROM wimmera"),
             ("b", "wimmera", "SELECT byes FROM wimmera", "SELECT wins FROM wimmera")]
    res = score_predictions(pairs, {"wimmera": wimmera}, seconds=[0.1, 0.3])
    assert isinstance(res, EvalResult)
    assert res.query_acc == 0.5
    assert res.tpq.mean_seconds == pytest.approx(0.2)
    write_report(res, tmp_path)
    summary = json.loads((tmp_path / "eval_report.json").read_text())
    assert summary["query_acc"] == 0.5
    header = (tmp_path / "eval_details.csv").read_text().splitlines()[0]
    assert header == "id,pred_sql,gold_sql,exact,parts,seconds"
