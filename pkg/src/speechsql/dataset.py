"""Instances, JSON-lines manifests and the ASR noise injector."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import EmptyTranscript, MalformedManifest, SpeechSQLError
from .features import PseudoTTSConfig, SpeechFeatures, extract_logmel, read_features, read_wav, synth_pseudo_speech
from .schema import Schema
from .semql import ActionSequence, default_grammar, normalize_literal, sql_literals, sql_to_actions
from .semql.grammar import Grammar

DEFAULT_DISTRACTORS = 8
DEFAULT_VALUE_POOL = tuple(str(i) for i in range(0, 31))
PSEUDO_PREFIX = "pseudo:"


@dataclass
class Instance:
    id: str
    features: SpeechFeatures
    db_id: str
    gold_sql: str
    gold_actions: ActionSequence
    candidate_values: list[str]
    transcript: list[str] | None = None
    audio: str | None = None


@dataclass
class NoiseSpec:
    target_wer: float
    seed: int = 0
    vocabulary: Sequence[str] = field(default_factory=list)
    tolerance: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.target_wer <= 1.0:
            raise ValueError("target_wer must lie in [0, 1]")


def _rng(*parts) -> random.Random:
    digest = hashlib.sha256("\x00".join(map(str, parts)).encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def candidate_values(sql: str, schema: Schema, grammar: Grammar, k: int = DEFAULT_DISTRACTORS,
                     seed: int = 0, key: str = "") -> list[str]:
    """Gold literals plus up to ``k`` distractors from the schema's value pool, shuffled."""
    gold = sql_literals(sql, schema, grammar)
    taken = {normalize_literal(v) for v in gold}
    pool = [v for v in (schema.value_pool or DEFAULT_VALUE_POOL) if normalize_literal(v) not in taken]
    pool = list(dict.fromkeys(normalize_literal(v) for v in pool))
    rng = _rng("values", seed, key)
    values = gold + rng.sample(pool, min(k, len(pool)))
    # shuffled so position carries no hint of which literal is gold
    rng.shuffle(values)
    return values


def load_audio(audio: str, base_dir=None, tts: PseudoTTSConfig | None = None) -> SpeechFeatures:
    if audio.startswith(PSEUDO_PREFIX):
        return synth_pseudo_speech(audio[len(PSEUDO_PREFIX):].split(), tts)
    path = Path(audio)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    if path.suffix.lower() == ".wav":
        return extract_logmel(read_wav(path))
    return read_features(path)


def build_instance(record: dict, schema: Schema, grammar: Grammar | None = None, *, k: int = DEFAULT_DISTRACTORS,
                   seed: int = 0, base_dir=None, tts: PseudoTTSConfig | None = None,
                   features: SpeechFeatures | None = None) -> Instance:
    grammar = grammar or default_grammar()
    for key in ("id", "db_id", "sql"):
        if key not in record:
            raise MalformedManifest(f"record {record.get('id', '?')}: missing field {key!r}")
    sql = record["sql"]
    values = candidate_values(sql, schema, grammar, k, seed, record["id"])
    actions = sql_to_actions(sql, schema, grammar, values)
    audio = record.get("audio")
    if features is None:
        if audio is None:
            raise MalformedManifest(f"record {record['id']}: missing field 'audio'")
        features = load_audio(audio, base_dir, tts)
    transcript = record.get("transcript")
    if isinstance(transcript, str):
        transcript = transcript.split()
    return Instance(record["id"], features, record["db_id"], sql, actions, values, transcript, audio)


def read_manifest(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedManifest(f"{path}:{lineno}: {exc}") from exc
            if not isinstance(rec, dict):
                raise MalformedManifest(f"{path}:{lineno}: expected a JSON object")
            records.append(rec)
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def instance_record(inst: Instance) -> dict:
    rec = {"id": inst.id, "db_id": inst.db_id, "audio": inst.audio, "sql": inst.gold_sql}
    if inst.transcript is not None:
        rec["transcript"] = " ".join(inst.transcript)
    return rec


def load_instances(manifest, schemas: dict[str, Schema], grammar: Grammar | None = None, *,
                   k: int = DEFAULT_DISTRACTORS, seed: int = 0, tts: PseudoTTSConfig | None = None,
                   skip_invalid: bool = False) -> list[Instance]:
    base = Path(manifest).parent
    out = []
    for rec in read_manifest(manifest):
        if rec.get("db_id") not in schemas:
            if skip_invalid:
                continue
            raise MalformedManifest(f"record {rec.get('id')}: unknown db_id {rec.get('db_id')!r}")
        try:
            out.append(build_instance(rec, schemas[rec["db_id"]], grammar, k=k, seed=seed, base_dir=base, tts=tts))
        except SpeechSQLError:
            if not skip_invalid:
                raise
    return out


def inject_asr_noise(transcript: Sequence[str], spec: NoiseSpec) -> list[str]:
    """Apply seeded substitutions, deletions and insertions at the target WER.

    The edit count is ``target * len`` with stochastic rounding, so the mean
    achieved WER matches the target; each edit touches a distinct reference
    word so the edits do not cancel under minimum-edit alignment.
    """
    from .evaluation import wer

    words = list(transcript)
    if not words:
        raise EmptyTranscript("cannot add noise to an empty transcript")
    if spec.target_wer == 0:
        return words
    vocab = list(dict.fromkeys(spec.vocabulary)) or ["<noise>"]
    rng = _rng("asr", spec.seed, " ".join(words), spec.target_wer)
    n = len(words)
    exact = spec.target_wer * n
    k = int(exact) + (rng.random() < exact - int(exact))
    k = min(k, n)
    best = None
    for _ in range(20):
        out = _apply_edits(words, k, vocab, rng)
        got = wer(words, out).wer
        if best is None or abs(got - k / n) < abs(best[1] - k / n):
            best = (out, got)
        if abs(got - k / n) < 1e-12:
            break
    return best[0]


def _apply_edits(words, k, vocab, rng):
    positions = set(rng.sample(range(len(words)), k))
    out = []
    for i, w in enumerate(words):
        if i not in positions:
            out.append(w)
            continue
        op = rng.choice(("sub", "del", "ins"))
        if op == "del":
            continue
        nxt = words[i + 1] if i + 1 < len(words) else None
        choices = [v for v in vocab if v not in (w, nxt)] or ["<noise>"]
        if op == "sub":
            out.append(rng.choice(choices))
        else:
            out.extend([w, rng.choice(choices)])
    return out
