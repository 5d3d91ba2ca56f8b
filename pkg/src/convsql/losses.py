"""The dual-input training objective.

For a turn with context encoding and self-contained encoding:

* parsing loss: teacher-forced negative log-likelihood of the gold action
  sequence under both inputs;
* schema grounding: bag-of-words loss from each input's latent state over
  the schema items referenced by the gold SQL, plus a symmetric KL between
  the two grounding distributions;
* parsing consistency: per-step symmetric KL between the two traces'
  active-head distributions, averaged over the sequence length;
* total = sp + lambda1 * sg_bow + lambda2 * (sp_kl + sg_kl), composed in
  exactly that arithmetic order.

Turns with no self-contained question fall back to the context-only terms
with zero consistency.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import grammar as gr
from .autodiff import Tensor
from .data import Interaction, Schema, Vocab
from .encoder import EncoderOutput, PreparedInput, prepare_input
from .errors import ShapeError
from .model import Model

logger = logging.getLogger("convsql")

EPS_KL = 1e-8


@dataclass
class TurnExample:
    schema: Schema
    interaction_index: int
    turn_index: int
    context_turns: list
    self_turns: Optional[list]  # single-element list, or None
    gold_sql: str
    gold_actions: list
    gold_item_ids: list[int]
    prep_ctx: PreparedInput
    prep_self: Optional[PreparedInput]


def build_examples(interactions: list[Interaction], schemas: dict[str, Schema], model: Model) -> list[TurnExample]:
    """Precompute per-turn inputs (linearization, relations, gold actions)."""
    from .data import linearize

    out = []
    for ii, inter in enumerate(interactions):
        schema = schemas[inter.database_id]
        context: list = []
        for ti, turn in enumerate(inter.turns):
            context = context + [turn.question]
            self_tokens = turn.self_contained or turn.generated_self_contained
            gold_actions = gr.sql_to_actions(turn.gold_sql, schema, model.grammar)
            items = sorted(
                gr.schema_item_index(schema, it) for it in gr.schema_items_of(turn.gold_sql, schema)
            )
            prep_ctx = prepare_input(linearize(context, schema), schema, model.vocab)
            prep_self = None
            self_turns = None
            if self_tokens:
                self_turns = [tuple(self_tokens)]
                prep_self = prepare_input(linearize(self_turns, schema), schema, model.vocab)
            out.append(
                TurnExample(
                    schema=schema,
                    interaction_index=ii,
                    turn_index=ti,
                    context_turns=list(context),
                    self_turns=self_turns,
                    gold_sql=turn.gold_sql,
                    gold_actions=gold_actions,
                    gold_item_ids=items,
                    prep_ctx=prep_ctx,
                    prep_self=prep_self,
                )
            )
    return out


# ---------------------------------------------------------------------------
# components


def grounding_distribution(z: Tensor, schema_states: Tensor, wsg: Tensor) -> Tensor:
    """Softmax over all schema items of f_d(z) = h_d . W . z   (shape (1, M))."""
    logits = ad.transpose(ad.matmul(schema_states, ad.matmul(wsg, ad.transpose(z))))
    return ad.softmax(logits, axis=-1)


def bow_loss(z: Tensor, schema_states: Tensor, gold_item_ids, wsg: Tensor) -> Tensor:
    """-sum over gold items of log softmax-probability of that item."""
    if not gold_item_ids:
        logger.warning("bow_loss: empty gold schema-item set contributes 0")
        return Tensor(np.zeros(()))
    probs = grounding_distribution(z, schema_states, wsg)
    terms = [ad.log(ad.pick(probs, 0, idx)) for idx in gold_item_ids]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.neg(total)


def sg_consistency(z_o: Tensor, z_r: Tensor, states_o: Tensor, states_r: Tensor, wsg: Tensor) -> Tensor:
    """Symmetric KL between the two inputs' grounding distributions."""
    if states_o.data.shape != states_r.data.shape:
        raise ShapeError("sg_consistency: the two encodings cover different schemas")
    p = grounding_distribution(z_o, states_o, wsg)
    q = grounding_distribution(z_r, states_r, wsg)
    return ad.sym_kl(p, q, EPS_KL)


def sp_loss(trace_ctx, trace_self, gold_actions) -> Tensor:
    """Summed negative log-likelihood of the gold actions under both traces."""
    total = Tensor(np.zeros(()))
    for trace in (trace_ctx, trace_self):
        if trace is None:
            continue
        if len(trace) != len(gold_actions):
            raise ShapeError(f"trace length {len(trace)} != gold length {len(gold_actions)}")
        for dists, action in zip(trace, gold_actions):
            total = total + ad.neg(dists.gold_logprob(action))
    return total


def sp_consistency(trace_ctx, trace_self) -> Tensor:
    """Length-normalized symmetric KL between the traces' active heads."""
    if len(trace_ctx) != len(trace_self):
        raise ShapeError(f"trace lengths differ: {len(trace_ctx)} vs {len(trace_self)}")
    total = Tensor(np.zeros(()))
    for a, b in zip(trace_ctx, trace_self):
        if a.active != b.active:
            raise ShapeError(f"traces disagree on the active head: {a.active} vs {b.active}")
        if a.active == "value":
            continue  # single placeholder: both distributions are the point mass
        total = total + ad.sym_kl(a.active_dist(), b.active_dist(), EPS_KL)
    return total * (1.0 / len(trace_ctx))


@dataclass
class LossBreakdown:
    sp: float
    sg_bow: float
    sp_kl: float
    sg_kl: float
    total: float
    lambda1: float
    lambda2: float
    total_tensor: Tensor = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {
            "sp": self.sp,
            "sg_bow": self.sg_bow,
            "sp_kl": self.sp_kl,
            "sg_kl": self.sg_kl,
            "total": self.total,
        }


def total_loss(
    example: TurnExample,
    enc_ctx: EncoderOutput,
    enc_self: Optional[EncoderOutput],
    model: Model,
    lambda1: float,
    lambda2: float,
    rng=None,
    train: bool = False,
    use_bow: bool = True,
    use_sg_kl: bool = True,
    use_sp_kl: bool = True,
) -> LossBreakdown:
    schema = example.schema
    wsg = model.params["loss.wsg"]
    zero = Tensor(np.zeros(()))

    trace_ctx = model.trace(enc_ctx, example.gold_actions, schema, rng, train)
    trace_self = (
        model.trace(enc_self, example.gold_actions, schema, rng, train) if enc_self is not None else None
    )

    sp = sp_loss(trace_ctx, trace_self, example.gold_actions)

    if use_bow:
        sg_bow = bow_loss(enc_ctx.z, enc_ctx.schema_item_states, example.gold_item_ids, wsg)
        if enc_self is not None:
            sg_bow = sg_bow + bow_loss(enc_self.z, enc_self.schema_item_states, example.gold_item_ids, wsg)
    else:
        sg_bow = zero

    if use_sg_kl and enc_self is not None:
        sg_kl = sg_consistency(enc_ctx.z, enc_self.z, enc_ctx.schema_item_states, enc_self.schema_item_states, wsg)
    else:
        sg_kl = zero

    if use_sp_kl and trace_self is not None:
        sp_kl = sp_consistency(trace_ctx, trace_self)
    else:
        sp_kl = zero

    total = sp + sg_bow * lambda1 + (sp_kl + sg_kl) * lambda2
    return LossBreakdown(
        sp=sp.item(),
        sg_bow=sg_bow.item(),
        sp_kl=sp_kl.item(),
        sg_kl=sg_kl.item(),
        total=total.item(),
        lambda1=lambda1,
        lambda2=lambda2,
        total_tensor=total,
    )
