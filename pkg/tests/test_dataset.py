import random

import numpy as np
import pytest

from speechsql.dataset import (
    NoiseSpec,
    build_instance,
    inject_asr_noise,
    instance_record,
    load_instances,
    read_manifest,
    write_manifest,
)
from speechsql.errors import EmptyTranscript, MalformedManifest, UnknownColumn
from speechsql.evaluation import query_match, wer
from speechsql.features import Waveform, write_features, write_wav, synth_pseudo_speech
from speechsql.semql import actions_to_sql
from speechsql.synth import generate_records, materialize

T5 = {"id": "t5", "db_id": "wimmera", "audio": "pseudo:what is the lowest number of draws with more than 1 byes",
      "transcript": "what is the lowest number of draws with more than 1 byes",
      "sql": "SELECT MIN(draws) FROM wimmera WHERE byes > 1"}


def test_table5_candidates_contain_gold(wimmera, grammar):
    inst = build_instance(T5, wimmera, grammar)
    assert "1" in inst.candidate_values
    assert len(inst.candidate_values) == 1 + 8
    assert len(set(inst.candidate_values)) == len(inst.candidate_values)
    assert inst.features.n_frames == 12 * 4
    assert inst.transcript[0] == "what"


def test_unknown_column(wimmera, grammar):
    with pytest.raises(UnknownColumn):
        build_instance(dict(T5, sql="SELECT foo FROM wimmera"), wimmera, grammar)


def test_candidates_deterministic(wimmera, grammar):
    a = build_instance(T5, wimmera, grammar, seed=3)
    b = build_instance(T5, wimmera, grammar, seed=3)
    assert a.candidate_values == b.candidate_values
    assert a.gold_actions == b.gold_actions


def test_gold_actions_round_trip_corpus(schemas, grammar):
    for rec in generate_records(schemas.values(), 300, seed=5):
        s = schemas[rec["db_id"]]
        inst = build_instance(rec, s, grammar)
        sql = actions_to_sql(inst.gold_actions, s, grammar, inst.candidate_values)
        assert query_match(sql, rec["sql"], s, grammar).exact
        n = len(inst.candidate_values)
        assert all(a.index < n for a in inst.gold_actions if a.kind == "value")


def test_manifest_round_trip(tmp_path, schemas, grammar):
    recs = materialize(generate_records(schemas.values(), 20, seed=2), tmp_path)
    write_manifest(tmp_path / "m.jsonl", recs)
    insts = load_instances(tmp_path / "m.jsonl", schemas, grammar)
    write_manifest(tmp_path / "m2.jsonl", [instance_record(i) for i in insts])
    again = load_instances(tmp_path / "m2.jsonl", schemas, grammar)
    for a, b in zip(insts, again):
        assert a == b
    assert read_manifest(tmp_path / "m.jsonl") == read_manifest(tmp_path / "m2.jsonl")


def test_audio_sources(tmp_path, wimmera, grammar):
    feats = synth_pseudo_speech(["x", "y"])
    write_features(tmp_path / "a.sqlf", feats)
    write_wav(tmp_path / "a.wav", Waveform(np.zeros(4096)))
    a = build_instance(dict(T5, audio="a.sqlf"), wimmera, grammar, base_dir=tmp_path)
    b = build_instance(dict(T5, audio="a.wav"), wimmera, grammar, base_dir=tmp_path)
    assert a.features == feats
    assert b.features.n_frames == 7


def test_malformed_manifest(tmp_path, schemas):
    (tmp_path / "bad.jsonl").write_text('{"id": "x"\n')
    with pytest.raises(MalformedManifest):
        load_instances(tmp_path / "bad.jsonl", schemas)
    (tmp_path / "nodb.jsonl").write_text('{"id": "x", "db_id": "nope", "sql": "SELECT a FROM b"}\n')
    with pytest.raises(MalformedManifest):
        load_instances(tmp_path / "nodb.jsonl", schemas)


VOCAB = [f"v{i}" for i in range(50)]


def test_noise_zero_is_identity():
    words = "show the wins of wimmera".split()
    assert inject_asr_noise(words, NoiseSpec(0.0, seed=1, vocabulary=VOCAB)) == words


def test_noise_hundred_words():
    words = [f"w{i % 37}" for i in range(100)]
    out = inject_asr_noise(words, NoiseSpec(0.33, seed=7, vocabulary=VOCAB))
    assert 0.31 <= wer(words, out).wer <= 0.35


def test_noise_deterministic():
    words = "what is the lowest number of draws with more than 1 byes".split()
    spec = NoiseSpec(0.5, seed=4, vocabulary=VOCAB)
    assert inject_asr_noise(words, spec) == inject_asr_noise(words, spec)


def test_noise_uses_all_edit_types():
    rng = random.Random(0)
    totals = [0, 0, 0]
    for k in range(200):
        words = [rng.choice(VOCAB[:20]) for _ in range(30)]
        rep = wer(words, inject_asr_noise(words, NoiseSpec(0.3, seed=k, vocabulary=VOCAB)))
        totals[0] += rep.S
        totals[1] += rep.D
        totals[2] += rep.I
    # the aligner relabels some deletion/insertion pairs as substitutions,
    # so only check that every edit type shows up in quantity
    share = np.array(totals) / sum(totals)
    assert np.all(share > 0.15)


def test_noise_empty():
    with pytest.raises(EmptyTranscript):
        inject_asr_noise([], NoiseSpec(0.1))


def test_noise_spec_range():
    with pytest.raises(ValueError):
        NoiseSpec(1.5)
