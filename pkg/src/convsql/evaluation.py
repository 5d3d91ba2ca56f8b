"""Exact-match scoring (question and interaction level) with turn and
difficulty breakdowns.

Exact match compares normalized ASTs component-wise: SELECT item lists,
FROM table sets, and AND/OR conjunct chains compare as multisets; ORDER BY
stays ordered; UNION and INTERSECT compare both operand orders, EXCEPT does
not; every literal is the shared placeholder. The difficulty rubric counts
aggregates, extra select items, predicates, grouping, ordering, limits and
joins; any nested subquery forces Extra and a set operator forces at least
Hard. Both rubrics are approximations fixed here, validated against the
bundled hand-labeled pairs (see README).

Inference consumes only the question context: nothing here ever reads a
turn's self-contained annotations.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from . import sqltext
from .data import Interaction, Schema
from .errors import ConvsqlError, SqlParseError
from .model import Model

logger = logging.getLogger("convsql")

TURN_BUCKETS = ("1", "2", "3", "4", ">4")
DIFFICULTIES = ("easy", "medium", "hard", "extra")


# ---------------------------------------------------------------------------
# component-wise exact match


def _item_key(item: sqltext.AggExpr):
    return ("item", item.agg, item.star, item.distinct, item.col)


def _multiset(keys) -> frozenset:
    return frozenset(Counter(keys).items())


def _flatten_bool(cond: sqltext.Cond, op: str) -> list:
    if isinstance(cond, sqltext.BoolOp) and cond.op == op:
        return _flatten_bool(cond.left, op) + _flatten_bool(cond.right, op)
    return [cond]


def _cond_key(cond: Optional[sqltext.Cond]):
    if cond is None:
        return None
    if isinstance(cond, sqltext.BoolOp):
        parts = _flatten_bool(cond, cond.op)
        return ("bool", cond.op, _multiset(_cond_key(p) for p in parts))
    if isinstance(cond, sqltext.Cmp):
        rhs = ("sub", _query_key(cond.rhs_query)) if cond.rhs_query is not None else "value"
        return ("cmp", cond.op, _item_key(cond.left), rhs)
    if isinstance(cond, sqltext.InSubquery):
        return ("in", cond.negated, _item_key(cond.left), _query_key(cond.query))
    if isinstance(cond, sqltext.Between):
        return ("between", _item_key(cond.left))
    raise ConvsqlError(f"unknown condition node {cond!r}")


def _core_key(core: sqltext.SelectCore):
    return (
        "core",
        core.distinct,
        _multiset(_item_key(i) for i in core.items),
        frozenset(core.tables),
        _cond_key(core.where),
        frozenset(core.group_cols),
        _cond_key(core.having),
        tuple(_item_key(i) for i in core.order_items),
        core.order_dir,
        core.limit,
    )


def _query_key(query: sqltext.Query):
    if query.setop is None:
        return ("q", _core_key(query.core))
    left = ("q", _core_key(query.core))
    right = _query_key(query.right)
    if query.setop in ("union", "intersect"):
        return ("setop", query.setop, frozenset((left, right)))
    return ("setop", "except", (left, right))


def exact_match(pred_sql: Optional[str], gold_sql: str, schema: Schema) -> bool:
    """Component-wise exact match; an unparseable prediction never matches."""
    if pred_sql is None:
        return False
    gold = sqltext.parse_sql(gold_sql, schema)
    try:
        pred = sqltext.parse_sql(pred_sql, schema)
    except SqlParseError as exc:
        logger.warning("unparseable prediction flagged as non-match: %s (%s)", pred_sql, exc)
        return False
    return _query_key(pred) == _query_key(gold)


# ---------------------------------------------------------------------------
# difficulty rubric


def _count_predicates(cond: Optional[sqltext.Cond]) -> int:
    if cond is None:
        return 0
    if isinstance(cond, sqltext.BoolOp):
        return _count_predicates(cond.left) + _count_predicates(cond.right)
    return 1


def _has_nesting(query: sqltext.Query) -> bool:
    def cond_nested(c: Optional[sqltext.Cond]) -> bool:
        if c is None:
            return False
        if isinstance(c, sqltext.BoolOp):
            return cond_nested(c.left) or cond_nested(c.right)
        if isinstance(c, sqltext.InSubquery):
            return True
        return isinstance(c, sqltext.Cmp) and c.rhs_query is not None

    q: Optional[sqltext.Query] = query
    while q is not None:
        if cond_nested(q.core.where) or cond_nested(q.core.having):
            return True
        q = q.right
    return False


def classify_difficulty(sql: str, schema: Schema) -> str:
    """easy | medium | hard | extra, from the documented point rubric."""
    query = sqltext.parse_sql(sql, schema)
    if _has_nesting(query):
        return "extra"
    points = 0
    has_setop = query.setop is not None
    q: Optional[sqltext.Query] = query
    while q is not None:
        core = q.core
        points += sum(1 for i in core.items if i.agg != "none")
        points += 1 if len(core.items) > 1 else 0
        n_preds = _count_predicates(core.where)
        points += 1 if n_preds >= 1 else 0
        points += 1 if n_preds >= 2 else 0
        points += 1 if core.group_cols else 0
        points += 1 if core.having is not None else 0
        points += 1 if core.order_items else 0
        points += 1 if core.limit else 0
        points += 1 if len(core.tables) >= 2 else 0
        points += 1 if len(core.tables) >= 3 else 0
        q = q.right
    if points <= 1:
        bucket = "easy"
    elif points <= 3:
        bucket = "medium"
    else:
        bucket = "hard"
    if has_setop and bucket in ("easy", "medium"):
        bucket = "hard"
    return bucket


# ---------------------------------------------------------------------------
# reports


@dataclass
class Bucket:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> Optional[float]:
        return self.correct / self.total if self.total else None


@dataclass
class EvalReport:
    qm: float
    im: float
    n_questions: int
    n_interactions: int
    per_turn: dict = field(default_factory=dict)
    per_difficulty: dict = field(default_factory=dict)
    unparseable: int = 0

    def to_json(self) -> str:
        def bucket_dict(buckets):
            return {
                k: {"correct": b.correct, "total": b.total, "accuracy": b.accuracy}
                for k, b in buckets.items()
            }

        return json.dumps(
            {
                "qm": self.qm,
                "im": self.im,
                "n_questions": self.n_questions,
                "n_interactions": self.n_interactions,
                "per_turn": bucket_dict(self.per_turn),
                "per_difficulty": bucket_dict(self.per_difficulty),
                "unparseable": self.unparseable,
            },
            sort_keys=True,
        )

    def to_text(self) -> str:
        lines = [
            f"questions matched (QM): {self.qm:.4f}  ({self.n_questions} questions)",
            f"interactions matched (IM): {self.im:.4f}  ({self.n_interactions} interactions)",
            f"unparseable predictions: {self.unparseable}",
            "",
            "turn      correct  total  accuracy",
        ]
        for k in TURN_BUCKETS:
            b = self.per_turn.get(k, Bucket())
            acc = f"{b.accuracy:.4f}" if b.accuracy is not None else "  -   "
            lines.append(f"{k:<9} {b.correct:>7}  {b.total:>5}  {acc}")
        lines.append("")
        lines.append("difficulty  correct  total  accuracy")
        for k in DIFFICULTIES:
            b = self.per_difficulty.get(k, Bucket())
            acc = f"{b.accuracy:.4f}" if b.accuracy is not None else "  -   "
            lines.append(f"{k:<11} {b.correct:>7}  {b.total:>5}  {acc}")
        return "\n".join(lines)


def _turn_bucket(turn_index: int) -> str:
    return TURN_BUCKETS[turn_index] if turn_index < 4 else ">4"


def score_predictions(
    predictions: list[list[Optional[str]]],
    interactions: list[Interaction],
    schemas: dict[str, Schema],
) -> EvalReport:
    """Build the report from per-turn predicted SQL strings (None = no parse)."""
    per_turn = {k: Bucket() for k in TURN_BUCKETS}
    per_diff = {k: Bucket() for k in DIFFICULTIES}
    n_q = 0
    correct_q = 0
    correct_i = 0
    unparseable = 0
    for preds, inter in zip(predictions, interactions):
        schema = schemas[inter.database_id]
        all_ok = True
        for ti, (pred, turn) in enumerate(zip(preds, inter.turns)):
            ok = exact_match(pred, turn.gold_sql, schema)
            if pred is None:
                unparseable += 1
            n_q += 1
            correct_q += ok
            all_ok = all_ok and ok
            tb = per_turn[_turn_bucket(ti)]
            tb.total += 1
            tb.correct += ok
            db = per_diff[classify_difficulty(turn.gold_sql, schema)]
            db.total += 1
            db.correct += ok
        correct_i += all_ok
    qm = correct_q / n_q if n_q else 0.0
    im = correct_i / len(interactions) if interactions else 0.0
    report = EvalReport(
        qm=qm,
        im=im,
        n_questions=n_q,
        n_interactions=len(interactions),
        per_turn=per_turn,
        per_difficulty=per_diff,
        unparseable=unparseable,
    )
    assert report.im <= report.qm + 1e-12, "IM must never exceed QM"
    return report


def predict_interactions(
    model: Model,
    interactions: list[Interaction],
    schemas: dict[str, Schema],
    beam: int = 5,
) -> list[list[Optional[str]]]:
    """Beam-1-of-`beam` predictions per turn, from the question context only."""
    out = []
    for inter in interactions:
        schema = schemas[inter.database_id]
        context: list = []
        preds: list[Optional[str]] = []
        for turn in inter.turns:
            context = context + [turn.question]
            try:
                sql, _ = model.predict_sql(context, schema, beam_size=beam)
            except ConvsqlError as exc:
                logger.warning("prediction failed (%s); counted as non-match", exc)
                sql = None
            preds.append(sql)
        out.append(preds)
    return out


def evaluate(
    model: Model,
    interactions: list[Interaction],
    schemas: dict[str, Schema],
    beam: int = 5,
    seed: int = 0,
) -> EvalReport:
    """Score beam-top-1 predictions; deterministic given model and data.

    `seed` is accepted for interface uniformity; inference itself is
    deterministic (no sampling anywhere).
    """
    del seed
    predictions = predict_interactions(model, interactions, schemas, beam=beam)
    return score_predictions(predictions, interactions, schemas)
