"""SQL text <-> AST for the supported query fragment.

Supported: SELECT with aggregation and DISTINCT, FROM with foreign-key
inferable joins, WHERE/HAVING with AND/OR over comparisons / [NOT] LIKE /
[NOT] IN (subquery) / BETWEEN, GROUP BY, ORDER BY with LIMIT, and
INTERSECT / UNION / EXCEPT. Literals are a single placeholder terminal:
every number or quoted string parses to it and renders back as ``value``.

Canonical rendering: keywords uppercase, identifiers lowercase, single
spaces, columns qualified only when the bare name would be ambiguous among
the FROM tables, joins rendered with ON conditions derived from schema
foreign keys, no aliases.
"""

import re
from dataclasses import dataclass
from typing import Optional, Union

from .data import Schema
from .errors import SqlParseError

AGG_OPS = ("none", "count", "sum", "avg", "min", "max")
CMP_OPS = ("=", "!=", "<", ">", "<=", ">=")
SET_OPS = ("intersect", "union", "except")

KEYWORDS = {
    "select", "distinct", "from", "join", "on", "as", "where", "and", "or", "not",
    "in", "like", "between", "group", "by", "having", "order", "asc", "desc",
    "limit", "intersect", "union", "except", "count", "sum", "avg", "min", "max",
    "value",
}


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class AggExpr:
    agg: str  # member of AGG_OPS
    star: bool = False
    distinct: bool = False
    col: Optional[int] = None  # global column id; None iff star


@dataclass(frozen=True)
class Cmp:
    op: str  # CMP_OPS or "like" / "not_like"
    left: AggExpr
    rhs_query: Optional["Query"] = None  # None => value placeholder


@dataclass(frozen=True)
class InSubquery:
    left: AggExpr
    query: "Query"
    negated: bool = False


@dataclass(frozen=True)
class Between:
    left: AggExpr


@dataclass(frozen=True)
class BoolOp:
    op: str  # "and" | "or"
    left: "Cond"
    right: "Cond"


Cond = Union[Cmp, InSubquery, Between, BoolOp]


@dataclass(frozen=True)
class SelectCore:
    items: tuple[AggExpr, ...]
    distinct: bool
    tables: tuple[int, ...]
    where: Optional[Cond] = None
    group_cols: tuple[int, ...] = ()
    having: Optional[Cond] = None
    order_items: tuple[AggExpr, ...] = ()
    order_dir: Optional[str] = None  # "asc" | "desc"
    limit: bool = False


@dataclass(frozen=True)
class Query:
    core: SelectCore
    setop: Optional[str] = None
    right: Optional["Query"] = None


# ---------------------------------------------------------------------------
# tokenizer

_SQL_TOKEN_RE = re.compile(
    r"""
    \s*(
        '(?:[^'])*'           # single-quoted string
      | "(?:[^"])*"           # double-quoted string
      | \d+\.\d+ | \.\d+ | \d+
      | <> | <= | >= | != | = | < | >
      | \( | \) | , | \. | \*
      | [A-Za-z_][A-Za-z_0-9]*
    )""",
    re.VERBOSE,
)


def tokenize_sql(sql: str) -> list[str]:
    tokens = []
    pos = 0
    s = sql.strip().rstrip(";").strip()
    while pos < len(s):
        m = _SQL_TOKEN_RE.match(s, pos)
        if not m:
            raise SqlParseError(f"cannot tokenize SQL at: {s[pos:pos + 20]!r}")
        tok = m.group(1)
        tokens.append(tok)
        pos = m.end()
    return tokens


def _is_literal(tok: str) -> bool:
    if tok and (tok[0] in "'\"" or tok[0].isdigit() or tok[0] == "."):
        return True
    return tok.lower() == "value"


class _Cursor:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self, ahead: int = 0) -> Optional[str]:
        i = self.pos + ahead
        return self.tokens[i] if i < len(self.tokens) else None

    def peek_kw(self, ahead: int = 0) -> Optional[str]:
        t = self.peek(ahead)
        return t.lower() if t is not None else None

    def next(self) -> str:
        if self.pos >= len(self.tokens):
            raise SqlParseError("unexpected end of SQL")
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kw: str) -> None:
        tok = self.next()
        if tok.lower() != kw:
            raise SqlParseError(f"expected {kw.upper()!r}, found {tok!r}")

    def accept(self, kw: str) -> bool:
        if self.peek_kw() == kw:
            self.pos += 1
            return True
        return False

    @property
    def done(self) -> bool:
        return self.pos >= len(self.tokens)


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, schema: Schema):
        self.schema = schema

    def parse(self, sql: str) -> Query:
        cur = _Cursor(tokenize_sql(sql))
        q = self._query(cur)
        if not cur.done:
            raise SqlParseError(f"trailing tokens after query: {cur.peek()!r}")
        return q

    def _query(self, cur: _Cursor) -> Query:
        core = self._select_core(cur)
        kw = cur.peek_kw()
        if kw in SET_OPS:
            cur.next()
            right = self._query(cur)
            return Query(core=core, setop=kw, right=right)
        return Query(core=core)

    def _select_core(self, cur: _Cursor) -> SelectCore:
        cur.expect("select")
        distinct = cur.accept("distinct")
        # FROM resolution happens after parsing the item text, so hold raw refs
        raw_items = [self._raw_item(cur)]
        while cur.accept(","):
            raw_items.append(self._raw_item(cur))
        cur.expect("from")
        tables, aliases = self._from_clause(cur)
        scope = _Scope(self.schema, tables, aliases)

        items = tuple(self._resolve_item(r, scope) for r in raw_items)
        where = None
        if cur.accept("where"):
            where = self._cond(cur, scope)
        group_cols: tuple[int, ...] = ()
        having = None
        if cur.peek_kw() == "group":
            cur.next()
            cur.expect("by")
            cols = [scope.resolve_column(*self._colref(cur))]
            while cur.accept(","):
                cols.append(scope.resolve_column(*self._colref(cur)))
            group_cols = tuple(cols)
            if cur.accept("having"):
                having = self._cond(cur, scope)
        order_items: tuple[AggExpr, ...] = ()
        order_dir = None
        limit = False
        if cur.peek_kw() == "order":
            cur.next()
            cur.expect("by")
            oi = [self._resolve_item(self._raw_item(cur), scope)]
            while cur.accept(","):
                oi.append(self._resolve_item(self._raw_item(cur), scope))
            order_items = tuple(oi)
            order_dir = "asc"
            if cur.peek_kw() in ("asc", "desc"):
                order_dir = cur.next().lower()
            if cur.accept("limit"):
                tok = cur.next()
                if not _is_literal(tok):
                    raise SqlParseError(f"LIMIT expects a literal, found {tok!r}")
                limit = True
        elif cur.peek_kw() == "limit":
            raise SqlParseError("unsupported construct: LIMIT without ORDER BY")
        return SelectCore(
            items=items,
            distinct=distinct,
            tables=tuple(tables),
            where=where,
            group_cols=group_cols,
            having=having,
            order_items=order_items,
            order_dir=order_dir,
            limit=limit,
        )

    # -- FROM ---------------------------------------------------------------

    def _from_clause(self, cur: _Cursor):
        tables: list[int] = []
        aliases: dict[str, int] = {}

        def one_table():
            name = cur.next().lower()
            tid = self.schema.table_id(name)
            if tid is None:
                raise SqlParseError(f"unknown table {name!r}")
            if tid in tables:
                raise SqlParseError(f"unsupported construct: self-join of table {name!r}")
            tables.append(tid)
            nxt = cur.peek_kw()
            if nxt == "as":
                cur.next()
                aliases[cur.next().lower()] = tid
            elif nxt is not None and nxt not in KEYWORDS and nxt not in (",", "(", ")") and nxt.isidentifier():
                aliases[cur.next().lower()] = tid

        one_table()
        while True:
            if cur.accept(","):
                one_table()
            elif cur.peek_kw() == "join":
                cur.next()
                one_table()
                if cur.accept("on"):
                    self._on_conds(cur, tables, aliases)
            else:
                break
        return tables, aliases

    def _on_conds(self, cur: _Cursor, tables, aliases) -> None:
        # ON t1.c = t2.c [AND ...]; validated then discarded: joins are
        # canonically re-derived from schema foreign keys.
        scope = _Scope(self.schema, tables, aliases)
        while True:
            left = self._colref(cur)
            scope.resolve_column(*left)
            cur.expect("=")
            right = self._colref(cur)
            scope.resolve_column(*right)
            if not cur.accept("and"):
                break

    # -- select items ---------------------------------------------------------

    def _raw_item(self, cur: _Cursor):
        kw = cur.peek_kw()
        if kw in AGG_OPS[1:]:
            agg = cur.next().lower()
            cur.expect("(")
            distinct = cur.accept("distinct")
            if cur.accept("*"):
                if distinct:
                    raise SqlParseError("unsupported construct: DISTINCT *")
                cur.expect(")")
                return (agg, False, None, True)
            ref = self._colref(cur)
            cur.expect(")")
            return (agg, distinct, ref, False)
        if cur.accept("*"):
            return ("none", False, None, True)
        distinct = False
        if kw == "distinct":
            # DISTINCT(col) inside an item list
            cur.next()
            distinct = True
        ref = self._colref(cur)
        return ("none", distinct, ref, False)

    def _resolve_item(self, raw, scope: "_Scope") -> AggExpr:
        agg, distinct, ref, star = raw
        if star:
            return AggExpr(agg=agg, star=True)
        col = scope.resolve_column(*ref)
        return AggExpr(agg=agg, distinct=distinct, col=col)

    def _colref(self, cur: _Cursor):
        first = cur.next()
        if not first.replace("_", "").isalnum() or _is_literal(first):
            raise SqlParseError(f"expected a column reference, found {first!r}")
        if cur.peek() == ".":
            cur.next()
            second = cur.next()
            return (first.lower(), second.lower())
        return (None, first.lower())

    # -- conditions -----------------------------------------------------------

    def _cond(self, cur: _Cursor, scope: "_Scope") -> Cond:
        left = self._and_cond(cur, scope)
        while cur.accept("or"):
            right = self._and_cond(cur, scope)
            left = BoolOp(op="or", left=left, right=right)
        return left

    def _and_cond(self, cur: _Cursor, scope: "_Scope") -> Cond:
        left = self._cond_unit(cur, scope)
        while cur.accept("and"):
            right = self._cond_unit(cur, scope)
            left = BoolOp(op="and", left=left, right=right)
        return left

    def _cond_unit(self, cur: _Cursor, scope: "_Scope") -> Cond:
        if cur.peek() == "(" and cur.peek_kw(1) != "select":
            cur.next()
            inner = self._cond(cur, scope)
            cur.expect(")")
            return inner
        left = self._resolve_item(self._raw_item(cur), scope)
        negated = cur.accept("not")
        kw = cur.peek_kw()
        if kw == "in":
            cur.next()
            cur.expect("(")
            if cur.peek_kw() != "select":
                raise SqlParseError("unsupported construct: IN over a value list")
            sub = self._query(cur)
            cur.expect(")")
            return InSubquery(left=left, query=sub, negated=negated)
        if kw == "like":
            cur.next()
            tok = cur.next()
            if not _is_literal(tok):
                raise SqlParseError(f"LIKE expects a literal, found {tok!r}")
            return Cmp(op="not_like" if negated else "like", left=left)
        if negated:
            raise SqlParseError("unsupported construct: NOT outside IN/LIKE")
        if kw == "between":
            cur.next()
            for part in ("low", "and", "high"):
                tok = cur.next()
                if part == "and":
                    if tok.lower() != "and":
                        raise SqlParseError(f"expected AND in BETWEEN, found {tok!r}")
                elif not _is_literal(tok):
                    raise SqlParseError(f"BETWEEN expects literals, found {tok!r}")
            return Between(left=left)
        op = cur.next()
        if op == "<>":
            op = "!="
        if op not in CMP_OPS:
            raise SqlParseError(f"unsupported construct: operator {op!r}")
        if cur.peek() == "(" and cur.peek_kw(1) == "select":
            cur.next()
            sub = self._query(cur)
            cur.expect(")")
            return Cmp(op=op, left=left, rhs_query=sub)
        tok = cur.next()
        if not _is_literal(tok):
            raise SqlParseError(
                f"unsupported construct: comparison against {tok!r} (only literals and subqueries)"
            )
        return Cmp(op=op, left=left)


class _Scope:
    def __init__(self, schema: Schema, tables: list[int], aliases: dict[str, int]):
        self.schema = schema
        self.tables = tables
        self.aliases = aliases

    def resolve_column(self, qualifier: Optional[str], name: str) -> int:
        schema = self.schema
        if qualifier is not None:
            tid = self.aliases.get(qualifier)
            if tid is None:
                tid = schema.table_id(qualifier)
            if tid is None:
                raise SqlParseError(f"unknown table or alias {qualifier!r}")
            for c in schema.columns_of(tid):
                if schema.columns[c].name == name:
                    return c
            raise SqlParseError(f"unknown column {qualifier}.{name}")
        hits = [c for t in self.tables for c in schema.columns_of(t) if schema.columns[c].name == name]
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            raise SqlParseError(f"ambiguous column {name!r}; qualify it")
        hits = [i for i, c in enumerate(schema.columns) if c.name == name]
        if len(hits) == 1:
            return hits[0]
        if not hits:
            raise SqlParseError(f"unknown column {name!r}")
        raise SqlParseError(f"ambiguous column {name!r}; qualify it")


def parse_sql(sql: str, schema: Schema) -> Query:
    """Parse `sql` against `schema`, or raise SqlParseError."""
    if not sql or not sql.strip():
        raise SqlParseError("empty SQL")
    return _Parser(schema).parse(sql)


# ---------------------------------------------------------------------------
# rendering


def _column_text(col: int, schema: Schema, from_tables: tuple[int, ...]) -> str:
    c = schema.columns[col]
    same_name = [t for t in from_tables if any(schema.columns[x].name == c.name for x in schema.columns_of(t))]
    if c.table in from_tables and len(same_name) == 1:
        return c.name
    return f"{schema.tables[c.table]}.{c.name}"


def _item_text(item: AggExpr, schema: Schema, from_tables: tuple[int, ...]) -> str:
    if item.star:
        arg = "*"
    else:
        arg = _column_text(item.col, schema, from_tables)
        if item.distinct:
            arg = f"DISTINCT {arg}"
    if item.agg == "none":
        return arg
    return f"{item.agg.upper()}({arg})"


def _join_condition(new: int, earlier: list[int], schema: Schema) -> Optional[str]:
    for prev in earlier:
        for a, b in schema.foreign_keys:
            ta, tb = schema.columns[a].table, schema.columns[b].table
            if {ta, tb} == {prev, new}:
                left, right = (a, b) if ta == prev else (b, a)
                return (
                    f"{schema.tables[schema.columns[left].table]}.{schema.columns[left].name} = "
                    f"{schema.tables[schema.columns[right].table]}.{schema.columns[right].name}"
                )
    return None


def _cond_text(cond: Cond, schema: Schema, from_tables: tuple[int, ...], parent: Optional[str] = None) -> str:
    if isinstance(cond, BoolOp):
        text = (
            f"{_cond_text(cond.left, schema, from_tables, cond.op)} {cond.op.upper()} "
            f"{_cond_text(cond.right, schema, from_tables, cond.op)}"
        )
        if parent == "and" and cond.op == "or":
            return f"({text})"
        return text
    left = _item_text(cond.left, schema, from_tables)
    if isinstance(cond, Cmp):
        if cond.op in ("like", "not_like"):
            op = "LIKE" if cond.op == "like" else "NOT LIKE"
            return f"{left} {op} value"
        rhs = f"({render_sql(cond.rhs_query, schema)})" if cond.rhs_query is not None else "value"
        return f"{left} {cond.op} {rhs}"
    if isinstance(cond, InSubquery):
        op = "NOT IN" if cond.negated else "IN"
        return f"{left} {op} ({render_sql(cond.query, schema)})"
    if isinstance(cond, Between):
        return f"{left} BETWEEN value AND value"
    raise SqlParseError(f"unknown condition node {cond!r}")


def render_sql(query: Query, schema: Schema) -> str:
    core = query.core
    ft = core.tables
    parts = ["SELECT"]
    if core.distinct:
        parts.append("DISTINCT")
    parts.append(", ".join(_item_text(i, schema, ft) for i in core.items))
    parts.append("FROM")
    from_text = schema.tables[ft[0]]
    for k, t in enumerate(ft[1:], start=1):
        on = _join_condition(t, list(ft[:k]), schema)
        from_text += f" JOIN {schema.tables[t]}"
        if on:
            from_text += f" ON {on}"
    parts.append(from_text)
    if core.where is not None:
        parts.append("WHERE")
        parts.append(_cond_text(core.where, schema, ft))
    if core.group_cols:
        parts.append("GROUP BY")
        parts.append(", ".join(_column_text(c, schema, ft) for c in core.group_cols))
        if core.having is not None:
            parts.append("HAVING")
            parts.append(_cond_text(core.having, schema, ft))
    if core.order_items:
        parts.append("ORDER BY")
        parts.append(", ".join(_item_text(i, schema, ft) for i in core.order_items))
        parts.append(core.order_dir.upper())
        if core.limit:
            parts.append("LIMIT value")
    text = " ".join(parts)
    if query.setop is not None:
        text += f" {query.setop.upper()} {render_sql(query.right, schema)}"
    return text


def normalize_sql(sql: str, schema: Schema) -> str:
    """Canonical form used for round-trip and report comparisons."""
    return render_sql(parse_sql(sql, schema), schema)


# ---------------------------------------------------------------------------
# schema items referenced by a query


def query_tables(query: Query) -> set[int]:
    out = set(query.core.tables)
    for sub in _subqueries(query):
        out |= set(sub.core.tables)
    return out


def _subqueries(query: Query) -> list[Query]:
    subs = []

    def walk_cond(c: Optional[Cond]):
        if c is None:
            return
        if isinstance(c, BoolOp):
            walk_cond(c.left)
            walk_cond(c.right)
        elif isinstance(c, InSubquery):
            subs.append(c.query)
            subs.extend(_subqueries(c.query))
        elif isinstance(c, Cmp) and c.rhs_query is not None:
            subs.append(c.rhs_query)
            subs.extend(_subqueries(c.rhs_query))

    walk_cond(query.core.where)
    walk_cond(query.core.having)
    if query.right is not None:
        subs.append(query.right)
        subs.extend(_subqueries(query.right))
    return subs


def query_columns(query: Query) -> set[int]:
    cols: set[int] = set()

    def take_item(item: AggExpr):
        if item.col is not None:
            cols.add(item.col)

    def walk_cond(c: Optional[Cond]):
        if c is None:
            return
        if isinstance(c, BoolOp):
            walk_cond(c.left)
            walk_cond(c.right)
        else:
            take_item(c.left)

    def walk(q: Query):
        for item in q.core.items:
            take_item(item)
        walk_cond(q.core.where)
        walk_cond(q.core.having)
        cols.update(q.core.group_cols)
        for item in q.core.order_items:
            take_item(item)

    walk(query)
    for sub in _subqueries(query):
        walk(sub)
    return cols
