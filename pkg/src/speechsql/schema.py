"""Database schema model and the JSON schema store."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

from .errors import DuplicateDbId, MalformedSchema

COLUMN_TYPES = ("text", "number")


@dataclass(frozen=True)
class Column:
    name: str
    type: str = "text"


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[Column, ...]

    def has_column(self, name: str) -> bool:
        key = name.lower()
        return any(c.name.lower() == key for c in self.columns)


@dataclass(frozen=True)
class ForeignKey:
    src_table: str
    src_column: str
    dst_table: str
    dst_column: str


@dataclass(frozen=True, eq=False)
class Schema:
    """Tables, keys and an optional pool of cell values used for distractors.

    Identifiers are matched case-insensitively.  Columns that share a name
    across tables are one entry of ``column_names``; ``SelectColumn`` indexes
    that list and ``SelectTable`` indexes ``tables``.
    """

    db_id: str
    tables: tuple[Table, ...]
    primary_keys: tuple[tuple[str, str], ...] = ()
    foreign_keys: tuple[ForeignKey, ...] = ()
    value_pool: tuple[str, ...] = ()

    def __post_init__(self):
        validate_schema(self)

    @cached_property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    @cached_property
    def column_names(self) -> list[str]:
        seen: dict[str, str] = {}
        for t in self.tables:
            for c in t.columns:
                seen.setdefault(c.name.lower(), c.name)
        return list(seen.values())

    @cached_property
    def _column_ids(self) -> dict[str, int]:
        return {name.lower(): i for i, name in enumerate(self.column_names)}

    @cached_property
    def _table_ids(self) -> dict[str, int]:
        return {name.lower(): i for i, name in enumerate(self.table_names)}

    @cached_property
    def tables_with_column(self) -> list[list[int]]:
        out = [[] for _ in self.column_names]
        for ti, t in enumerate(self.tables):
            for c in t.columns:
                j = self._column_ids[c.name.lower()]
                if ti not in out[j]:
                    out[j].append(ti)
        return out

    @cached_property
    def merged_map(self) -> dict[str, list[tuple[str, str]]]:
        out: dict[str, list[tuple[str, str]]] = {}
        for t in self.tables:
            for c in t.columns:
                out.setdefault(self.column_names[self._column_ids[c.name.lower()]], []).append((t.name, c.name))
        return out

    @property
    def n_tables(self) -> int:
        return len(self.tables)

    @property
    def n_columns(self) -> int:
        return len(self.column_names)

    def table_id(self, name: str) -> int | None:
        return self._table_ids.get(name.lower())

    def column_id(self, name: str) -> int | None:
        return self._column_ids.get(name.lower())

    def column_type(self, table: int, column: int) -> str:
        key = self.column_names[column].lower()
        for c in self.tables[table].columns:
            if c.name.lower() == key:
                return c.type
        raise KeyError((table, column))

    def to_dict(self) -> dict:
        return {
            "db_id": self.db_id,
            "tables": [
                {"name": t.name, "columns": [{"name": c.name, "type": c.type} for c in t.columns]}
                for t in self.tables
            ],
            "primary_keys": [list(pk) for pk in self.primary_keys],
            "foreign_keys": [[fk.src_table, fk.src_column, fk.dst_table, fk.dst_column] for fk in self.foreign_keys],
            "value_pool": list(self.value_pool),
        }


def validate_schema(s: Schema) -> None:
    where = f"databases[{s.db_id}]"
    if not s.tables:
        raise MalformedSchema(f"{where}.tables: at least one table is required")
    names = set()
    for i, t in enumerate(s.tables):
        key = t.name.lower()
        if not t.name or key in names:
            raise MalformedSchema(f"{where}.tables[{i}]: empty or duplicate table name {t.name!r}")
        names.add(key)
        if not t.columns:
            raise MalformedSchema(f"{where}.tables[{i}] ({t.name}): table has no columns")
        seen = set()
        for j, c in enumerate(t.columns):
            if not c.name or c.name.lower() in seen:
                raise MalformedSchema(f"{where}.{t.name}.columns[{j}]: empty or duplicate column {c.name!r}")
            seen.add(c.name.lower())
            if c.type not in COLUMN_TYPES:
                raise MalformedSchema(f"{where}.{t.name}.{c.name}: unknown type {c.type!r}")
    by_name = {t.name.lower(): t for t in s.tables}
    for table, column in s.primary_keys:
        _check_ref(by_name, table, column, f"{where}.primary_keys")
    for k, fk in enumerate(s.foreign_keys):
        _check_ref(by_name, fk.src_table, fk.src_column, f"{where}.foreign_keys[{k}]")
        _check_ref(by_name, fk.dst_table, fk.dst_column, f"{where}.foreign_keys[{k}]")


def _check_ref(by_name, table, column, where):
    t = by_name.get(str(table).lower())
    if t is None:
        raise MalformedSchema(f"{where}: unknown table {table!r}")
    if not t.has_column(column):
        raise MalformedSchema(f"{where}: table {table!r} has no column {column!r}")


def schema_from_dict(d: dict) -> Schema:
    try:
        db_id = d["db_id"]
        tables = tuple(
            Table(t["name"], tuple(Column(c["name"], c.get("type", "text")) for c in t["columns"]))
            for t in d["tables"]
        )
        pks = tuple((str(a), str(b)) for a, b in d.get("primary_keys", []))
        fks = tuple(ForeignKey(*map(str, fk)) for fk in d.get("foreign_keys", []))
        pool = tuple(str(v) for v in d.get("value_pool", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedSchema(f"databases[{d.get('db_id', '?') if isinstance(d, dict) else '?'}]: {exc!r}") from exc
    return Schema(db_id, tables, pks, fks, pool)


def load_schema_store(path) -> dict[str, Schema]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedSchema(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("databases"), list):
        raise MalformedSchema(f"{path}: expected an object with a 'databases' list")
    store: dict[str, Schema] = {}
    for d in doc["databases"]:
        s = schema_from_dict(d)
        if s.db_id in store:
            raise DuplicateDbId(s.db_id)
        store[s.db_id] = s
    return store


def save_schema_store(path, schemas) -> None:
    doc = {"databases": [s.to_dict() for s in schemas]}
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def name_tokens(name: str) -> list[str]:
    """Lowercased tokens of an identifier, split on '_', case and digit boundaries."""
    import re

    parts = re.findall(r"[A-Z]+(?![a-z])|[A-Z]?[a-z]+|\d+", name)
    return [p.lower() for p in parts]
