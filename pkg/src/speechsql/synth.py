"""Synthetic schemas and template-generated speech/SQL corpora.

The corpus is built from a fixed set of small schemas and question
templates.  Each record pairs a spoken question (rendered as pseudo-speech
tokens) with its SQL.  Everything is driven by one ``random.Random`` so a
seed fully determines the output.
"""

from __future__ import annotations

import random
from pathlib import Path

from .features import PseudoTTSConfig, synth_pseudo_speech, write_features
from .schema import Column, ForeignKey, Schema, Table, name_tokens

NUMBERS = tuple(str(i) for i in range(1, 21))

AGG_WORDS = {"min": "lowest", "max": "highest", "avg": "average", "sum": "total"}
CMP_WORDS = {">": "more than", "<": "less than", ">=": "at least", "<=": "at most", "!=": "other than"}


def _t(name, *cols):
    return Table(name, tuple(_col(c) for c in cols))


def _col(spec: str) -> Column:
    # "name:n" marks a numeric column, bare names are text
    if spec.endswith(":n"):
        return Column(spec[:-2], "number")
    return Column(spec, "text")


def builtin_schemas() -> list[Schema]:
    """Twelve small databases, two of them with a foreign-key join."""
    S = []
    S.append(Schema("wimmera", (_t("wimmera", "wimmera_fl", "wins:n", "byes:n", "losses:n", "draws:n", "against:n"),),
                    value_pool=NUMBERS))
    S.append(Schema("products", (
        _t("products", "product_id:n", "color_code", "product_name", "price:n"),
        _t("ref_colors", "color_code", "color_description"),
    ), primary_keys=(("products", "product_id"), ("ref_colors", "color_code")),
        foreign_keys=(ForeignKey("products", "color_code", "ref_colors", "color_code"),),
        value_pool=NUMBERS + ("yellow", "red", "blue", "green")))
    S.append(Schema("school", (
        _t("student", "sid:n", "sname", "age:n"),
        _t("pet", "pid:n", "sid:n", "pname", "weight:n"),
    ), primary_keys=(("student", "sid"), ("pet", "pid")),
        foreign_keys=(ForeignKey("pet", "sid", "student", "sid"),),
        value_pool=NUMBERS + ("tom", "anna", "rex", "kitty")))
    S.append(Schema("league", (_t("team", "team_name", "city", "points:n", "goals:n", "games:n"),),
                    value_pool=NUMBERS + ("london", "paris", "rome")))
    S.append(Schema("shop", (_t("item", "brand", "price:n", "stock:n", "rating:n"),),
                    value_pool=NUMBERS + ("acme", "zen", "nova")))
    S.append(Schema("election", (_t("candidate", "party", "votes:n", "age:n", "district"),),
                    value_pool=NUMBERS + ("green", "labor", "north", "south")))
    S.append(Schema("music", (_t("song", "title", "genre", "year:n", "length:n", "plays:n"),),
                    value_pool=NUMBERS + ("rock", "jazz", "pop")))
    S.append(Schema("company", (_t("employee", "name", "salary:n", "rank:n", "department"),),
                    value_pool=NUMBERS + ("sales", "legal", "anna")))
    S.append(Schema("stadium", (_t("venue", "venue_name", "capacity:n", "seats:n", "country"),),
                    value_pool=NUMBERS + ("spain", "brazil", "japan")))
    S.append(Schema("city", (_t("town", "town_name", "population:n", "area:n", "mayor"),),
                    value_pool=NUMBERS + ("smith", "lee", "garcia")))
    S.append(Schema("film", (_t("movie", "title", "budget:n", "score:n", "director"),),
                    value_pool=NUMBERS + ("nolan", "lee", "smith")))
    S.append(Schema("farm", (_t("field", "crop", "area:n", "yield:n", "owner"),),
                    value_pool=NUMBERS + ("wheat", "corn", "rice")))
    return S


tokens = name_tokens


def _fk_pairs(schema: Schema):
    return [fk for fk in schema.foreign_keys if fk.src_table.lower() != fk.dst_table.lower()]


class _Builder:
    def __init__(self, schema: Schema, rng: random.Random):
        self.s = schema
        self.rng = rng
        shared = {c for c, members in schema.merged_map.items() if len(members) > 1}
        self.shared = {c.lower() for c in shared}

    def cols(self, table: Table, kind: str | None = None):
        return [c for c in table.columns if c.name.lower() not in self.shared and (kind is None or c.type == kind)]

    def text_values(self):
        return [v for v in self.s.value_pool if not v.isdigit()]

    def single(self):
        r = self.rng
        table = r.choice(self.s.tables)
        num, txt = self.cols(table, "number"), self.cols(table, "text")
        allc = self.cols(table)
        tname = " ".join(tokens(table.name))
        kinds = ["plain", "two", "order", "super", "between", "avgsub"] if num else ["plain", "two"]
        if num:
            kinds += ["agg", "agg", "where", "where", "aggwhere", "and", "or", "count"]
        if txt and self.text_values():
            kinds += ["where_text"]
        kind = r.choice(kinds)
        c = r.choice(allc)
        w = lambda col: " ".join(tokens(col.name))  # noqa: E731
        if kind == "plain":
            return f"show the {w(c)} of {tname}", f"SELECT {c.name} FROM {table.name}"
        if kind == "two":
            if len(allc) < 2:
                return None
            c1, c2 = r.sample(allc, 2)
            return (f"show the {w(c1)} and {w(c2)} of {tname}",
                    f"SELECT {c1.name}, {c2.name} FROM {table.name}")
        if kind == "count":
            return f"what is the number of {w(c)} in {tname}", f"SELECT COUNT({c.name}) FROM {table.name}"
        n1 = r.choice(num) if num else None
        if kind == "agg":
            agg = r.choice(list(AGG_WORDS))
            return f"what is the {AGG_WORDS[agg]} {w(n1)}", f"SELECT {agg.upper()}({n1.name}) FROM {table.name}"
        if kind in ("where", "aggwhere"):
            op = r.choice(list(CMP_WORDS))
            v = r.choice(NUMBERS)
            cond = f"with {CMP_WORDS[op]} {v} {w(n1)}"
            if kind == "where":
                target = r.choice([x for x in allc if x != n1] or allc)
                return f"show the {w(target)} {cond}", f"SELECT {target.name} FROM {table.name} WHERE {n1.name} {op} {v}"
            others = [x for x in num if x != n1] or num
            t2 = r.choice(others)
            agg = r.choice(list(AGG_WORDS))
            return (f"what is the {AGG_WORDS[agg]} {w(t2)} {cond}",
                    f"SELECT {agg.upper()}({t2.name}) FROM {table.name} WHERE {n1.name} {op} {v}")
        if kind in ("and", "or"):
            if len(num) < 2:
                return None
            a, b = r.sample(num, 2)
            op1, op2 = r.choice(list(CMP_WORDS)), r.choice(list(CMP_WORDS))
            v1, v2 = r.choice(NUMBERS), r.choice(NUMBERS)
            if a.name.lower() > b.name.lower():
                # speak conditions in the canonical conjunct order the labels use
                (a, op1, v1), (b, op2, v2) = (b, op2, v2), (a, op1, v1)
            return (f"show the {w(c)} with {CMP_WORDS[op1]} {v1} {w(a)} {kind} {CMP_WORDS[op2]} {v2} {w(b)}",
                    f"SELECT {c.name} FROM {table.name} WHERE {a.name} {op1} {v1} {kind.upper()} {b.name} {op2} {v2}")
        if kind == "order":
            d = r.choice(["asc", "desc"])
            word = "ascending" if d == "asc" else "descending"
            return (f"show the {w(c)} of {tname} sorted by {w(n1)} {word}",
                    f"SELECT {c.name} FROM {table.name} ORDER BY {n1.name} {d.upper()}")
        if kind == "super":
            d = r.choice(["asc", "desc"])
            word = "least" if d == "asc" else "most"
            target = r.choice([x for x in allc if x != n1] or allc)
            return (f"which {w(target)} has the {word} {w(n1)}",
                    f"SELECT {target.name} FROM {table.name} ORDER BY {n1.name} {d.upper()} LIMIT 1")
        if kind == "between":
            lo, hi = sorted(r.sample(range(1, 21), 2))
            return (f"show the {w(c)} with {w(n1)} between {lo} and {hi}",
                    f"SELECT {c.name} FROM {table.name} WHERE {n1.name} BETWEEN {lo} AND {hi}")
        if kind == "avgsub":
            op, word = r.choice([(">", "above"), ("<", "below")])
            target = r.choice([x for x in allc if x != n1] or allc)
            return (f"show the {w(target)} with {w(n1)} {word} average",
                    f"SELECT {target.name} FROM {table.name} WHERE {n1.name} {op} (SELECT AVG({n1.name}) FROM {table.name})")
        if kind == "where_text":
            tc = r.choice(txt)
            v = r.choice(self.text_values())
            target = r.choice([x for x in allc if x != tc] or allc)
            return (f"show the {w(target)} whose {w(tc)} is {v}",
                    f"SELECT {target.name} FROM {table.name} WHERE {tc.name} = '{v}'")
        return None

    def join(self):
        fks = _fk_pairs(self.s)
        if not fks:
            return None
        r = self.rng
        fk = r.choice(fks)
        ta = next(t for t in self.s.tables if t.name.lower() == fk.src_table.lower())
        tb = next(t for t in self.s.tables if t.name.lower() == fk.dst_table.lower())
        if r.random() < 0.5:
            ta, tb = tb, ta
        ca = r.choice(self.cols(ta))
        txt = self.cols(tb, "text")
        w = lambda col: " ".join(tokens(col.name))  # noqa: E731
        if txt and self.text_values():
            cb = r.choice(txt)
            v = r.choice(self.text_values())
            return (f"show the {w(ca)} of {' '.join(tokens(ta.name))} whose {w(cb)} is {v}",
                    f"SELECT T1.{ca.name} FROM {ta.name} AS T1 JOIN {tb.name} AS T2 "
                    f"ON T1.{fk.src_column} = T2.{fk.dst_column} WHERE T2.{cb.name} = '{v}'")
        num = self.cols(tb, "number")
        if not num:
            return None
        cb = r.choice(num)
        op = r.choice(list(CMP_WORDS))
        v = r.choice(NUMBERS)
        return (f"show the {w(ca)} of {' '.join(tokens(ta.name))} with {CMP_WORDS[op]} {v} {w(cb)}",
                f"SELECT T1.{ca.name} FROM {ta.name} AS T1 JOIN {tb.name} AS T2 "
                f"ON T1.{fk.src_column} = T2.{fk.dst_column} WHERE T2.{cb.name} {op} {v}")


def generate_records(schemas, n: int, seed: int = 0, prefix: str = "q", exclude=()) -> list[dict]:
    """``n`` records with distinct (question, db_id) pairs, skipping ``exclude`` pairs."""
    rng = random.Random(seed)
    schemas = list(schemas)
    seen = set(exclude)
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * max(n, 1):
            raise RuntimeError(f"could only generate {len(out)} distinct records out of {n}")
        schema = schemas[len(out) % len(schemas)] if len(out) < len(schemas) else rng.choice(schemas)
        b = _Builder(schema, rng)
        pair = b.join() if (_fk_pairs(schema) and rng.random() < 0.3) else b.single()
        if pair is None:
            continue
        question, sql = pair
        key = (question, schema.db_id)
        if key in seen:
            continue
        seen.add(key)
        out.append({"id": f"{prefix}{len(out):05d}", "db_id": schema.db_id, "transcript": question,
                    "sql": sql, "audio": "pseudo:" + question})
    return out


def split_records(schemas, n_train: int, n_test: int, seed: int = 0) -> tuple[list[dict], list[dict]]:
    """Train and held-out records whose (question, schema) pairs are disjoint."""
    train = generate_records(schemas, n_train, seed, "tr")
    taken = {(r["transcript"], r["db_id"]) for r in train}
    test = generate_records(schemas, n_test, seed + 7919, "te", exclude=taken)
    return train, test


def materialize(records, out_dir, feature_dir: str = "features", tts: PseudoTTSConfig | None = None) -> list[dict]:
    """Write pseudo-speech feature files and point each record's audio at its file."""
    out = Path(out_dir)
    (out / feature_dir).mkdir(parents=True, exist_ok=True)
    rewritten = []
    for rec in records:
        feats = synth_pseudo_speech(rec["transcript"].split(), tts)
        rel = f"{feature_dir}/{rec['id']}.sqlf"
        write_features(out / rel, feats)
        rewritten.append(dict(rec, audio=rel))
    return rewritten
