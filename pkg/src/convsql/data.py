"""Schemas, interactions, linearization and relation graphs.

Input files mirror the public multi-turn text-to-SQL JSON layouts:

* schema file: JSON array of ``{db_id, table_names, column_names:
  [[table_index, name], ...], column_types, primary_keys, foreign_keys}``
  where entry 0 of column_names is ``[-1, "*"]`` and indexes in
  primary/foreign keys refer to that list.
* interaction file: JSON array of ``{database_id, interaction:
  [{utterance, query, self_contained?}]}``.

Names are lowercase SQL identifiers; multi-token semantics come from
splitting on underscores.
"""

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

PAD = "[pad]"
UNK = "[unk]"
LATENT = "[z]"
SEP = "[sep]"
BOS = "[bos]"
EOS = "[eos]"
SPECIALS = (PAD, UNK, LATENT, SEP, BOS, EOS)

COLUMN_TYPES = ("text", "number", "time", "boolean", "others")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def name_words(name: str) -> list[str]:
    """Identifier -> word pieces for embedding averaging and text matching."""
    return [w for w in name.lower().split("_") if w]


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class Column:
    table: int
    name: str
    ctype: str


@dataclass(frozen=True)
class Schema:
    database_id: str
    tables: tuple[str, ...]
    columns: tuple[Column, ...]  # real columns only, grouped by table order; no "*"
    primary_keys: frozenset[int] = frozenset()
    foreign_keys: tuple[tuple[int, int], ...] = ()

    def columns_of(self, table: int) -> list[int]:
        return [i for i, c in enumerate(self.columns) if c.table == table]

    def column_label(self, col: int) -> str:
        c = self.columns[col]
        return f"{self.tables[c.table]}.{c.name}"

    def table_id(self, name: str) -> int | None:
        name = name.lower()
        for i, t in enumerate(self.tables):
            if t == name:
                return i
        return None

    def fk_pair(self, a: int, b: int) -> bool:
        return (a, b) in self.foreign_keys or (b, a) in self.foreign_keys

    def validate(self) -> None:
        if len(set(self.tables)) != len(self.tables):
            raise DataError(f"{self.database_id}: duplicate table names")
        for t in range(len(self.tables)):
            names = [self.columns[c].name for c in self.columns_of(t)]
            if len(set(names)) != len(names):
                raise DataError(f"{self.database_id}: duplicate column names in table {self.tables[t]!r}")
        for c in self.columns:
            if not 0 <= c.table < len(self.tables):
                raise DataError(f"{self.database_id}: column {c.name!r} references missing table {c.table}")
            if c.ctype not in COLUMN_TYPES:
                raise DataError(f"{self.database_id}: column {c.name!r} has unknown type {c.ctype!r}")
        for ref in self.primary_keys:
            if not 0 <= ref < len(self.columns):
                raise DataError(f"{self.database_id}: dangling primary key ref {ref}")
        for a, b in self.foreign_keys:
            for ref in (a, b):
                if not 0 <= ref < len(self.columns):
                    raise DataError(f"{self.database_id}: dangling foreign key ref {ref}")


def load_schemas(path: str) -> dict[str, Schema]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(raw, list):
        raise DataError(f"{path}: expected a JSON array of schemas")
    schemas: dict[str, Schema] = {}
    for i, entry in enumerate(raw):
        where = f"{path}[{i}]"
        try:
            db_id = entry["db_id"]
            table_names = [t.lower() for t in entry["table_names"]]
            col_entries = entry["column_names"]
            col_types = entry["column_types"]
        except (KeyError, TypeError, AttributeError) as exc:
            raise DataError(f"{where}: malformed schema entry ({exc})") from exc
        if len(col_entries) != len(col_types):
            raise DataError(f"{where}: column_names and column_types lengths differ")
        columns = []
        file_to_real: dict[int, int] = {}
        for file_idx, ((t_idx, name), ctype) in enumerate(zip(col_entries, col_types)):
            if t_idx == -1:
                continue  # "*" pseudo-column
            file_to_real[file_idx] = len(columns)
            columns.append(Column(table=int(t_idx), name=name.lower(), ctype=ctype))

        def remap(ref: int) -> int:
            if ref not in file_to_real:
                raise DataError(f"{where}: key ref {ref} points at the '*' pseudo-column or out of range")
            return file_to_real[ref]

        try:
            pks = frozenset(remap(r) for r in entry.get("primary_keys", []))
            fks = tuple((remap(a), remap(b)) for a, b in entry.get("foreign_keys", []))
        except (TypeError, ValueError) as exc:
            raise DataError(f"{where}: malformed keys ({exc})") from exc
        schema = Schema(
            database_id=db_id,
            tables=tuple(table_names),
            columns=tuple(columns),
            primary_keys=pks,
            foreign_keys=fks,
        )
        try:
            schema.validate()
        except DataError as exc:
            raise DataError(f"{where}: {exc}") from exc
        if db_id in schemas:
            raise DataError(f"{where}: duplicate database_id {db_id!r}")
        schemas[db_id] = schema
    return schemas


# ---------------------------------------------------------------------------
# interactions


@dataclass
class Turn:
    question: tuple[str, ...]
    gold_sql: str
    self_contained: tuple[str, ...] | None = None
    generated_self_contained: tuple[str, ...] | None = None
    provenance: str | None = None


@dataclass
class Interaction:
    database_id: str
    turns: list[Turn]


def load_interactions(path: str, schemas: dict[str, Schema]) -> list[Interaction]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if not isinstance(raw, list):
        raise DataError(f"{path}: expected a JSON array of interactions")
    from .sqltext import SqlParseError, parse_sql  # deferred: sqltext depends on Schema

    out: list[Interaction] = []
    for i, entry in enumerate(raw):
        where = f"{path}[{i}]"
        db_id = entry.get("database_id")
        if db_id not in schemas:
            raise DataError(f"{where}: unknown database_id {db_id!r}")
        schema = schemas[db_id]
        turns = []
        for j, t in enumerate(entry.get("interaction", [])):
            twhere = f"{where}.interaction[{j}]"
            question = tuple(tokenize(t.get("utterance", "")))
            if not question:
                raise DataError(f"{twhere}: empty utterance")
            sql = t.get("query", "")
            try:
                parse_sql(sql, schema)
            except SqlParseError as exc:
                raise DataError(f"{twhere}: gold SQL does not parse: {exc}") from exc
            sc = t.get("self_contained")
            sc_tokens = tuple(tokenize(sc)) if sc else None
            turns.append(
                Turn(
                    question=question,
                    gold_sql=sql,
                    self_contained=sc_tokens,
                    provenance=t.get("provenance"),
                )
            )
        if not turns:
            raise DataError(f"{where}: interaction has no turns")
        out.append(Interaction(database_id=db_id, turns=turns))
    return out


def save_interactions(path: str, interactions: list[Interaction]) -> None:
    payload = []
    for inter in interactions:
        turns = []
        for t in inter.turns:
            entry = {"utterance": " ".join(t.question), "query": t.gold_sql}
            if t.self_contained is not None:
                entry["self_contained"] = " ".join(t.self_contained)
            if t.provenance is not None:
                entry["provenance"] = t.provenance
            turns.append(entry)
        payload.append({"database_id": inter.database_id, "interaction": turns})
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary has duplicate tokens")

    @classmethod
    def build(cls, token_lists) -> "Vocab":
        seen = dict.fromkeys(SPECIALS)
        for toks in token_lists:
            for t in toks:
                seen.setdefault(t, None)
        return cls(tokens=list(seen))

    @classmethod
    def for_dataset(cls, interactions: list[Interaction], schemas: dict[str, Schema]) -> "Vocab":
        lists = []
        for inter in interactions:
            for t in inter.turns:
                lists.append(t.question)
                if t.self_contained:
                    lists.append(t.self_contained)
        for schema in schemas.values():
            for name in schema.tables:
                lists.append(name_words(name))
            for col in schema.columns:
                lists.append(name_words(col.name))
        return cls.build(lists)

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def ids(self, tokens) -> list[int]:
        return [self.id(t) for t in tokens]

    def __len__(self):
        return len(self.tokens)


# ---------------------------------------------------------------------------
# linearization


SEG_LATENT = "latent"
SEG_QUESTION = "question"
SEG_TABLE = "table"
SEG_COLUMN = "column"
SEG_SEP = "sep"


@dataclass(frozen=True)
class SegmentRef:
    kind: str
    ref: int  # turn id / table id / global column id; -1 for latent and sep


@dataclass(frozen=True)
class LinearizedInput:
    tokens: tuple[str, ...]
    segments: tuple[SegmentRef, ...]
    database_id: str

    def __post_init__(self):
        if len(self.tokens) != len(self.segments):
            raise DataError("linearized tokens/segments length mismatch")
        if not self.segments or self.segments[0].kind != SEG_LATENT:
            raise DataError("linearized input must start with the latent token")

    def positions(self, kind: str) -> list[int]:
        return [i for i, s in enumerate(self.segments) if s.kind == kind]

    @property
    def table_positions(self) -> list[int]:
        pos = {s.ref: i for i, s in enumerate(self.segments) if s.kind == SEG_TABLE}
        return [pos[t] for t in sorted(pos)]

    @property
    def column_positions(self) -> list[int]:
        pos = {s.ref: i for i, s in enumerate(self.segments) if s.kind == SEG_COLUMN}
        return [pos[c] for c in sorted(pos)]

    def __len__(self):
        return len(self.tokens)


def linearize(question_turns: list[tuple[str, ...]], schema: Schema) -> LinearizedInput:
    """Lay out [latent] q1 [sep] q2 ... [sep] t1 c11 c12 [sep] t2 c21 ...

    `question_turns` is the question context (one entry per turn) or a single
    self-contained question; both share the same layout.
    """
    if not question_turns or any(len(q) == 0 for q in question_turns):
        raise DataError("linearize: empty question")
    tokens: list[str] = [LATENT]
    segments: list[SegmentRef] = [SegmentRef(SEG_LATENT, -1)]
    for turn_id, q in enumerate(question_turns):
        for tok in q:
            tokens.append(tok)
            segments.append(SegmentRef(SEG_QUESTION, turn_id))
        tokens.append(SEP)
        segments.append(SegmentRef(SEG_SEP, -1))
    for t in range(len(schema.tables)):
        if t > 0:
            tokens.append(SEP)
            segments.append(SegmentRef(SEG_SEP, -1))
        tokens.append(schema.tables[t])
        segments.append(SegmentRef(SEG_TABLE, t))
        for c in schema.columns_of(t):
            tokens.append(schema.columns[c].name)
            segments.append(SegmentRef(SEG_COLUMN, c))
    return LinearizedInput(tokens=tuple(tokens), segments=tuple(segments), database_id=schema.database_id)


# ---------------------------------------------------------------------------
# relation graph

RELATION_LABELS = (
    "none",
    "qs-exact",
    "qs-partial",
    "qs-nomatch",
    "qq-dist-2",
    "qq-dist-1",
    "qq-dist+1",
    "qq-dist+2",
    "col-of",
    "table-has",
    "same-table",
    "foreign-key",
)
REL_ID = {name: i for i, name in enumerate(RELATION_LABELS)}
NUM_RELATIONS = len(RELATION_LABELS)

_QQ_LABELS = {-2: REL_ID["qq-dist-2"], -1: REL_ID["qq-dist-1"], 1: REL_ID["qq-dist+1"], 2: REL_ID["qq-dist+2"]}


@dataclass(frozen=True)
class RelationGraph:
    labels: np.ndarray  # (N, N) int64 into RELATION_LABELS
    vocabulary: tuple[str, ...] = RELATION_LABELS

    def __post_init__(self):
        if self.labels.ndim != 2 or self.labels.shape[0] != self.labels.shape[1]:
            raise DataError("relation matrix must be square")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.vocabulary)):
            raise DataError("relation label id out of vocabulary range")


def _text_match_label(token: str, item_name: str) -> int:
    words = name_words(item_name)
    joined = " ".join(words)
    if token == item_name or token == joined or (len(words) == 1 and token == words[0]):
        return REL_ID["qs-exact"]
    if len(token) >= 2:
        for w in words + [item_name, joined]:
            if len(w) >= 2 and (token in w or w in token):
                return REL_ID["qs-partial"]
    return REL_ID["qs-nomatch"]


def build_relations(inp: LinearizedInput, schema: Schema) -> RelationGraph:
    n = len(inp)
    labels = np.zeros((n, n), dtype=np.int64)
    segs = inp.segments
    toks = inp.tokens
    questionish = [s.kind in (SEG_LATENT, SEG_QUESTION) for s in segs]

    item_name = {}
    for i, s in enumerate(segs):
        if s.kind == SEG_TABLE:
            item_name[i] = schema.tables[s.ref]
        elif s.kind == SEG_COLUMN:
            item_name[i] = schema.columns[s.ref].name

    for i in range(n):
        si = segs[i]
        for j in range(n):
            if i == j:
                continue
            sj = segs[j]
            if questionish[i] and questionish[j]:
                d = max(-2, min(2, j - i))
                labels[i, j] = _QQ_LABELS[d]
            elif questionish[i] and j in item_name:
                # the latent token never matches schema text, so it lands on qs-nomatch
                labels[i, j] = _text_match_label(toks[i], item_name[j])
            elif i in item_name and questionish[j]:
                labels[i, j] = _text_match_label(toks[j], item_name[i])
            elif si.kind == SEG_COLUMN and sj.kind == SEG_TABLE:
                if schema.columns[si.ref].table == sj.ref:
                    labels[i, j] = REL_ID["col-of"]
            elif si.kind == SEG_TABLE and sj.kind == SEG_COLUMN:
                if schema.columns[sj.ref].table == si.ref:
                    labels[i, j] = REL_ID["table-has"]
            elif si.kind == SEG_COLUMN and sj.kind == SEG_COLUMN:
                if schema.fk_pair(si.ref, sj.ref):
                    labels[i, j] = REL_ID["foreign-key"]
                elif schema.columns[si.ref].table == schema.columns[sj.ref].table:
                    labels[i, j] = REL_ID["same-table"]
    return RelationGraph(labels=labels)
