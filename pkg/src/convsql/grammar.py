"""SQL AST grammar, action sequences, and constrained-decoding masks.

A query tree is built depth-first, left-to-right from three action kinds:
ApplyRule expands the frontier nonterminal by a production; SelectColumn /
SelectTable / SelectValue fill the COL / TAB / VAL terminals. The grammar
below generates exactly the fragment :mod:`convsql.sqltext` parses, so
``sql -> actions -> sql`` round-trips through the canonical rendering.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import sqltext
from .data import Schema
from .errors import GrammarError

COL, TAB, VAL = "COL", "TAB", "VAL"
TERMINALS = (COL, TAB, VAL)

# (name, lhs, rhs) in canonical order; ids are dense positions in this list.
_PRODUCTIONS = (
    ("q_simple", "QUERY", ("SELCORE",)),
    ("q_intersect", "QUERY", ("SELCORE", "QUERY")),
    ("q_union", "QUERY", ("SELCORE", "QUERY")),
    ("q_except", "QUERY", ("SELCORE", "QUERY")),
    ("sel_core", "SELCORE", ("SELECT", "FROM", "WHERE", "GROUP", "ORDER")),
    ("select", "SELECT", ("DIST", "ITEMS")),
    ("dist_on", "DIST", ()),
    ("dist_off", "DIST", ()),
    ("items_one", "ITEMS", ("AGG",)),
    ("items_more", "ITEMS", ("AGG", "ITEMS")),
    ("agg_none", "AGG", ("ARG",)),
    ("agg_count", "AGG", ("ARG",)),
    ("agg_sum", "AGG", ("ARG",)),
    ("agg_avg", "AGG", ("ARG",)),
    ("agg_min", "AGG", ("ARG",)),
    ("agg_max", "AGG", ("ARG",)),
    ("arg_col", "ARG", (COL,)),
    ("arg_distinct_col", "ARG", (COL,)),
    ("arg_star", "ARG", ()),
    ("from_tables", "FROM", ("TABLES",)),
    ("tables_one", "TABLES", (TAB,)),
    ("tables_more", "TABLES", (TAB, "TABLES")),
    ("where_none", "WHERE", ()),
    ("where_cond", "WHERE", ("COND",)),
    ("cond_and", "COND", ("COND", "COND")),
    ("cond_or", "COND", ("COND", "COND")),
    ("cmp_eq", "COND", ("AGG", "RHS")),
    ("cmp_ne", "COND", ("AGG", "RHS")),
    ("cmp_lt", "COND", ("AGG", "RHS")),
    ("cmp_gt", "COND", ("AGG", "RHS")),
    ("cmp_le", "COND", ("AGG", "RHS")),
    ("cmp_ge", "COND", ("AGG", "RHS")),
    ("cmp_like", "COND", ("AGG", VAL)),
    ("cmp_not_like", "COND", ("AGG", VAL)),
    ("cmp_in", "COND", ("AGG", "QUERY")),
    ("cmp_not_in", "COND", ("AGG", "QUERY")),
    ("cmp_between", "COND", ("AGG", VAL, VAL)),
    ("rhs_value", "RHS", (VAL,)),
    ("rhs_subquery", "RHS", ("QUERY",)),
    ("group_none", "GROUP", ()),
    ("group_by", "GROUP", ("COLS", "HAVING")),
    ("cols_one", "COLS", (COL,)),
    ("cols_more", "COLS", (COL, "COLS")),
    ("having_none", "HAVING", ()),
    ("having_cond", "HAVING", ("COND",)),
    ("order_none", "ORDER", ()),
    ("order_asc", "ORDER", ("ITEMS", "LIMIT")),
    ("order_desc", "ORDER", ("ITEMS", "LIMIT")),
    ("limit_none", "LIMIT", ()),
    ("limit_value", "LIMIT", (VAL,)),
)

_CMP_RULE = {"=": "cmp_eq", "!=": "cmp_ne", "<": "cmp_lt", ">": "cmp_gt", "<=": "cmp_le", ">=": "cmp_ge"}
_RULE_CMP = {v: k for k, v in _CMP_RULE.items()}


@dataclass(frozen=True)
class Rule:
    id: int
    name: str
    lhs: str
    rhs: tuple[str, ...]


class Grammar:
    """Immutable production inventory with dense rule ids."""

    def __init__(self, productions, symbols: Optional[tuple[str, ...]] = None, root: str = "QUERY"):
        self.rules = tuple(Rule(i, name, lhs, tuple(rhs)) for i, (name, lhs, rhs) in enumerate(productions))
        self.root = root
        self.by_name = {r.name: r for r in self.rules}
        if len(self.by_name) != len(self.rules):
            raise GrammarError("duplicate production names")
        self.by_lhs: dict[str, list[Rule]] = {}
        for r in self.rules:
            self.by_lhs.setdefault(r.lhs, []).append(r)
        nonterminals = []
        for r in self.rules:
            if r.lhs not in nonterminals:
                nonterminals.append(r.lhs)
        self.nonterminals = tuple(nonterminals)
        self.symbols = symbols if symbols is not None else self.nonterminals + TERMINALS
        self.symbol_index = {s: i for i, s in enumerate(self.symbols)}
        self._validate()

    def _validate(self) -> None:
        reachable = {self.root}
        for r in self.rules:
            reachable.update(s for s in r.rhs if s not in TERMINALS)
        missing = [s for s in sorted(reachable) if s not in self.by_lhs]
        if missing:
            raise GrammarError(f"nonterminals without productions: {missing}")
        for s in self.symbols:
            if s not in self.symbol_index:
                raise GrammarError("inconsistent symbol table")

    @classmethod
    def default(cls) -> "Grammar":
        return cls(_PRODUCTIONS)

    def subset(self, names) -> "Grammar":
        """Pruned grammar keeping only the named productions (ids re-densified)."""
        keep = [(r.name, r.lhs, r.rhs) for r in self.rules if r.name in set(names)]
        return Grammar(keep, symbols=self.symbols, root=self.root)

    def rule_id(self, name: str) -> int:
        return self.by_name[name].id

    def rules_text(self) -> str:
        lines = [f"{r.id}: {r.lhs} -> {r.name}({', '.join(r.rhs)})" for r in self.rules]
        return "\n".join(lines) + "\n"

    def __len__(self):
        return len(self.rules)


DEFAULT_GRAMMAR = Grammar.default()


# ---------------------------------------------------------------------------
# actions


@dataclass(frozen=True)
class ApplyRule:
    rule: int


@dataclass(frozen=True)
class SelectColumn:
    column: int


@dataclass(frozen=True)
class SelectTable:
    table: int


@dataclass(frozen=True)
class SelectValue:
    placeholder: int = 0


Action = Union[ApplyRule, SelectColumn, SelectTable, SelectValue]


class ActionSpace:
    """Dense integer ids over all actions for a (grammar, schema) pair.

    Layout: rules, then tables, then columns, then the value placeholder;
    lexicographic comparisons of id sequences implement beam tie-breaking.
    """

    def __init__(self, grammar: Grammar, n_tables: int, n_columns: int):
        self.grammar = grammar
        self.n_tables = n_tables
        self.n_columns = n_columns
        self.n_rules = len(grammar)
        self.size = self.n_rules + n_tables + n_columns + 1

    @classmethod
    def for_schema(cls, grammar: Grammar, schema: Schema) -> "ActionSpace":
        return cls(grammar, len(schema.tables), len(schema.columns))

    def id_of(self, action: Action) -> int:
        if isinstance(action, ApplyRule):
            return action.rule
        if isinstance(action, SelectTable):
            return self.n_rules + action.table
        if isinstance(action, SelectColumn):
            return self.n_rules + self.n_tables + action.column
        if isinstance(action, SelectValue):
            return self.n_rules + self.n_tables + self.n_columns
        raise GrammarError(f"unknown action {action!r}")

    def action_of(self, aid: int) -> Action:
        if not 0 <= aid < self.size:
            raise GrammarError(f"action id {aid} out of range")
        if aid < self.n_rules:
            return ApplyRule(aid)
        aid -= self.n_rules
        if aid < self.n_tables:
            return SelectTable(aid)
        aid -= self.n_tables
        if aid < self.n_columns:
            return SelectColumn(aid)
        return SelectValue(0)


# ---------------------------------------------------------------------------
# frontier-tracked construction state


class AstState:
    """Partial-tree state: just the pending-symbol stack plus the action log.

    The stack holds (symbol, created_step) with the frontier on top; the
    actual tree is rebuilt from the action log by :func:`build_tree`.
    """

    __slots__ = ("grammar", "n_tables", "n_columns", "stack", "actions")

    def __init__(self, grammar: Grammar, n_tables: int, n_columns: int):
        self.grammar = grammar
        self.n_tables = n_tables
        self.n_columns = n_columns
        self.stack: list[tuple[str, int]] = [(grammar.root, -1)]
        self.actions: list[Action] = []

    @classmethod
    def for_schema(cls, grammar: Grammar, schema: Schema) -> "AstState":
        return cls(grammar, len(schema.tables), len(schema.columns))

    @property
    def complete(self) -> bool:
        return not self.stack

    @property
    def step(self) -> int:
        return len(self.actions)

    @property
    def frontier_symbol(self) -> str:
        if self.complete:
            raise GrammarError("no frontier: tree is complete")
        return self.stack[-1][0]

    @property
    def frontier_parent_step(self) -> int:
        if self.complete:
            raise GrammarError("no frontier: tree is complete")
        return self.stack[-1][1]

    def clone(self) -> "AstState":
        out = AstState.__new__(AstState)
        out.grammar = self.grammar
        out.n_tables = self.n_tables
        out.n_columns = self.n_columns
        out.stack = list(self.stack)
        out.actions = list(self.actions)
        return out

    def apply(self, action: Action) -> None:
        if self.complete:
            raise GrammarError("actions after completion")
        symbol, _ = self.stack[-1]
        t = self.step
        if isinstance(action, ApplyRule):
            if not 0 <= action.rule < len(self.grammar):
                raise GrammarError(f"rule id {action.rule} out of range")
            rule = self.grammar.rules[action.rule]
            if rule.lhs != symbol:
                raise GrammarError(f"rule {rule.name} expands {rule.lhs}, frontier is {symbol}")
            self.stack.pop()
            for child in reversed(rule.rhs):
                self.stack.append((child, t))
        elif isinstance(action, SelectColumn):
            if symbol != COL:
                raise GrammarError(f"SelectColumn at frontier {symbol}")
            if not 0 <= action.column < self.n_columns:
                raise GrammarError(f"column id {action.column} out of range")
            self.stack.pop()
        elif isinstance(action, SelectTable):
            if symbol != TAB:
                raise GrammarError(f"SelectTable at frontier {symbol}")
            if not 0 <= action.table < self.n_tables:
                raise GrammarError(f"table id {action.table} out of range")
            self.stack.pop()
        elif isinstance(action, SelectValue):
            if symbol != VAL:
                raise GrammarError(f"SelectValue at frontier {symbol}")
            if action.placeholder != 0:
                raise GrammarError(f"value placeholder {action.placeholder} out of range")
            self.stack.pop()
        else:
            raise GrammarError(f"unknown action {action!r}")
        self.actions.append(action)


def valid_actions(state: AstState, schema: Schema, space: Optional[ActionSpace] = None) -> np.ndarray:
    """Boolean mask over the action space: exactly the legal next actions."""
    if state.complete:
        raise GrammarError("valid_actions on a complete tree")
    if space is None:
        space = ActionSpace.for_schema(state.grammar, schema)
    mask = np.zeros(space.size, dtype=bool)
    symbol = state.frontier_symbol
    if symbol == COL:
        mask[space.n_rules + space.n_tables : space.n_rules + space.n_tables + space.n_columns] = True
    elif symbol == TAB:
        mask[space.n_rules : space.n_rules + space.n_tables] = True
    elif symbol == VAL:
        mask[space.size - 1] = True
    else:
        for r in state.grammar.by_lhs.get(symbol, ()):
            mask[r.id] = True
    if not mask.any():
        raise GrammarError(f"no legal actions at frontier {symbol}")
    return mask


# ---------------------------------------------------------------------------
# AST -> actions


def _emit_query(q: sqltext.Query, g: Grammar, out: list[Action]) -> None:
    A = lambda name: out.append(ApplyRule(g.rule_id(name)))
    if q.setop is None:
        A("q_simple")
        _emit_core(q.core, g, out)
    else:
        A(f"q_{q.setop}")
        _emit_core(q.core, g, out)
        _emit_query(q.right, g, out)


def _emit_core(core: sqltext.SelectCore, g: Grammar, out: list[Action]) -> None:
    A = lambda name: out.append(ApplyRule(g.rule_id(name)))
    A("sel_core")
    A("select")
    A("dist_on" if core.distinct else "dist_off")
    _emit_items(core.items, g, out)
    A("from_tables")
    _emit_tables(core.tables, g, out)
    if core.where is None:
        A("where_none")
    else:
        A("where_cond")
        _emit_cond(core.where, g, out)
    if not core.group_cols:
        A("group_none")
    else:
        A("group_by")
        _emit_cols(core.group_cols, g, out)
        if core.having is None:
            A("having_none")
        else:
            A("having_cond")
            _emit_cond(core.having, g, out)
    if not core.order_items:
        A("order_none")
    else:
        A("order_asc" if core.order_dir == "asc" else "order_desc")
        _emit_items(core.order_items, g, out)
        if core.limit:
            A("limit_value")
            out.append(SelectValue(0))
        else:
            A("limit_none")


def _emit_items(items, g: Grammar, out: list[Action]) -> None:
    for i, item in enumerate(items):
        out.append(ApplyRule(g.rule_id("items_one" if i == len(items) - 1 else "items_more")))
        _emit_agg(item, g, out)


def _emit_agg(item: sqltext.AggExpr, g: Grammar, out: list[Action]) -> None:
    out.append(ApplyRule(g.rule_id(f"agg_{item.agg}")))
    if item.star:
        out.append(ApplyRule(g.rule_id("arg_star")))
    else:
        out.append(ApplyRule(g.rule_id("arg_distinct_col" if item.distinct else "arg_col")))
        out.append(SelectColumn(item.col))


def _emit_tables(tables, g: Grammar, out: list[Action]) -> None:
    for i, t in enumerate(tables):
        out.append(ApplyRule(g.rule_id("tables_one" if i == len(tables) - 1 else "tables_more")))
        out.append(SelectTable(t))


def _emit_cols(cols, g: Grammar, out: list[Action]) -> None:
    for i, c in enumerate(cols):
        out.append(ApplyRule(g.rule_id("cols_one" if i == len(cols) - 1 else "cols_more")))
        out.append(SelectColumn(c))


def _emit_cond(cond: sqltext.Cond, g: Grammar, out: list[Action]) -> None:
    A = lambda name: out.append(ApplyRule(g.rule_id(name)))
    if isinstance(cond, sqltext.BoolOp):
        A("cond_and" if cond.op == "and" else "cond_or")
        _emit_cond(cond.left, g, out)
        _emit_cond(cond.right, g, out)
    elif isinstance(cond, sqltext.Cmp):
        if cond.op in ("like", "not_like"):
            A("cmp_like" if cond.op == "like" else "cmp_not_like")
            _emit_agg(cond.left, g, out)
            out.append(SelectValue(0))
        else:
            A(_CMP_RULE[cond.op])
            _emit_agg(cond.left, g, out)
            if cond.rhs_query is None:
                A("rhs_value")
                out.append(SelectValue(0))
            else:
                A("rhs_subquery")
                _emit_query(cond.rhs_query, g, out)
    elif isinstance(cond, sqltext.InSubquery):
        A("cmp_not_in" if cond.negated else "cmp_in")
        _emit_agg(cond.left, g, out)
        _emit_query(cond.query, g, out)
    elif isinstance(cond, sqltext.Between):
        A("cmp_between")
        _emit_agg(cond.left, g, out)
        out.append(SelectValue(0))
        out.append(SelectValue(0))
    else:
        raise GrammarError(f"cannot emit condition {cond!r}")


# ---------------------------------------------------------------------------
# actions -> tree -> AST


class _Node:
    __slots__ = ("symbol", "rule", "children", "value")

    def __init__(self, symbol: str):
        self.symbol = symbol
        self.rule: Optional[Rule] = None
        self.children: list["_Node"] = []
        self.value: Optional[int] = None


def build_tree(actions, grammar: Grammar, n_tables: int, n_columns: int) -> _Node:
    """Replay an action sequence into a complete tree, validating each step."""
    state = AstState(grammar, n_tables, n_columns)
    root = _Node(grammar.root)
    node_stack = [root]
    for action in actions:
        state.apply(action)  # raises on any illegal step
        node = node_stack.pop()
        if isinstance(action, ApplyRule):
            rule = grammar.rules[action.rule]
            node.rule = rule
            node.children = [_Node(s) for s in rule.rhs]
            node_stack.extend(reversed(node.children))
        elif isinstance(action, SelectColumn):
            node.value = action.column
        elif isinstance(action, SelectTable):
            node.value = action.table
        else:
            node.value = action.placeholder
    if not state.complete:
        raise GrammarError(f"incomplete tree: {len(state.stack)} nonterminals pending")
    return root


def _conv_query(node: _Node) -> sqltext.Query:
    name = node.rule.name
    if name == "q_simple":
        return sqltext.Query(core=_conv_core(node.children[0]))
    return sqltext.Query(core=_conv_core(node.children[0]), setop=name[2:], right=_conv_query(node.children[1]))


def _conv_core(node: _Node) -> sqltext.SelectCore:
    sel, frm, where, group, order = node.children
    distinct = sel.children[0].rule.name == "dist_on"
    items = tuple(_conv_items(sel.children[1]))
    tables = tuple(_conv_list(frm.children[0], lambda n: n.children[0].value))
    where_cond = _conv_cond(where.children[0]) if where.rule.name == "where_cond" else None
    group_cols: tuple[int, ...] = ()
    having = None
    if group.rule.name == "group_by":
        group_cols = tuple(_conv_list(group.children[0], lambda n: n.children[0].value))
        hav = group.children[1]
        if hav.rule.name == "having_cond":
            having = _conv_cond(hav.children[0])
    order_items: tuple = ()
    order_dir = None
    limit = False
    if order.rule.name in ("order_asc", "order_desc"):
        order_dir = "asc" if order.rule.name == "order_asc" else "desc"
        order_items = tuple(_conv_items(order.children[0]))
        limit = order.children[1].rule.name == "limit_value"
    return sqltext.SelectCore(
        items=items,
        distinct=distinct,
        tables=tables,
        where=where_cond,
        group_cols=group_cols,
        having=having,
        order_items=order_items,
        order_dir=order_dir,
        limit=limit,
    )


def _conv_list(node: _Node, take) -> list:
    out = [take(node)]
    while node.rule.name.endswith("_more"):
        node = node.children[1]
        out.append(take(node))
    return out


def _conv_items(node: _Node) -> list[sqltext.AggExpr]:
    return _conv_list(node, lambda n: _conv_agg(n.children[0]))


def _conv_agg(node: _Node) -> sqltext.AggExpr:
    agg = node.rule.name[4:]
    arg = node.children[0]
    if arg.rule.name == "arg_star":
        return sqltext.AggExpr(agg=agg, star=True)
    return sqltext.AggExpr(agg=agg, distinct=arg.rule.name == "arg_distinct_col", col=arg.children[0].value)


def _conv_cond(node: _Node) -> sqltext.Cond:
    name = node.rule.name
    if name in ("cond_and", "cond_or"):
        return sqltext.BoolOp(op=name[5:], left=_conv_cond(node.children[0]), right=_conv_cond(node.children[1]))
    if name in _RULE_CMP:
        left = _conv_agg(node.children[0])
        rhs = node.children[1]
        rhs_query = _conv_query(rhs.children[0]) if rhs.rule.name == "rhs_subquery" else None
        return sqltext.Cmp(op=_RULE_CMP[name], left=left, rhs_query=rhs_query)
    if name in ("cmp_like", "cmp_not_like"):
        return sqltext.Cmp(op="like" if name == "cmp_like" else "not_like", left=_conv_agg(node.children[0]))
    if name in ("cmp_in", "cmp_not_in"):
        return sqltext.InSubquery(
            left=_conv_agg(node.children[0]), query=_conv_query(node.children[1]), negated=name == "cmp_not_in"
        )
    if name == "cmp_between":
        return sqltext.Between(left=_conv_agg(node.children[0]))
    raise GrammarError(f"cannot convert condition rule {name}")


# ---------------------------------------------------------------------------
# public conversions


def sql_to_actions(sql: str, schema: Schema, grammar: Grammar = DEFAULT_GRAMMAR) -> list[Action]:
    query = sqltext.parse_sql(sql, schema)
    out: list[Action] = []
    _emit_query(query, grammar, out)
    return out


def actions_to_ast(actions, schema: Schema, grammar: Grammar = DEFAULT_GRAMMAR) -> sqltext.Query:
    root = build_tree(actions, grammar, len(schema.tables), len(schema.columns))
    return _conv_query(root)


def actions_to_sql(actions, schema: Schema, grammar: Grammar = DEFAULT_GRAMMAR) -> str:
    return sqltext.render_sql(actions_to_ast(actions, schema, grammar), schema)


# ---------------------------------------------------------------------------
# schema items referenced by a query


def schema_items_of(sql: str, schema: Schema) -> set[tuple[str, int]]:
    """Deduplicated ("table", id) / ("column", id) items referenced by `sql`."""
    query = sqltext.parse_sql(sql, schema)
    items: set[tuple[str, int]] = set()
    items.update(("table", t) for t in sqltext.query_tables(query))
    items.update(("column", c) for c in sqltext.query_columns(query))
    return items


def schema_item_count(schema: Schema) -> int:
    return len(schema.tables) + len(schema.columns)


def schema_item_index(schema: Schema, item: tuple[str, int]) -> int:
    kind, ref = item
    if kind == "table":
        return ref
    if kind == "column":
        return len(schema.tables) + ref
    raise GrammarError(f"unknown schema item kind {kind!r}")


def format_schema_item(schema: Schema, item: tuple[str, int]) -> str:
    kind, ref = item
    return schema.tables[ref] if kind == "table" else schema.column_label(ref)
