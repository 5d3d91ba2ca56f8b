"""Self-training loop that grows the reformulation dataset to a fixed point.

Starting from seed annotations, each loop trains a reformulation model on
the accepted set, generates a candidate reformulation for every turn of the
dataset (recursively feeding the previous turn's generation), keeps the
candidates a frozen single-turn parser verifies (any of its beam candidates
exact-matches the gold SQL), and unions them into the accepted set. The
loop exits when the accepted-set size stops growing (or at the loop cap,
reported but not fatal). A final merge overlays accepted questions onto
the last generation pool so every turn ends up with a self-contained
question, tagged with its provenance.
"""

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .cqr import CqrConfig, CqrExample, CqrModel, CqrTrainConfig, cqr_input_tokens, cqr_train
from .data import Interaction, Schema, tokenize
from .errors import ConvsqlError, DataError
from .evaluation import exact_match
from .model import Model

logger = logging.getLogger("convsql")


def load_seed_annotations(path: str, interactions: list[Interaction]) -> dict[tuple[int, int], tuple]:
    """{(interaction_index, turn_index): tokens} from a seed file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    out: dict[tuple[int, int], tuple] = {}
    for i, entry in enumerate(raw):
        where = f"{path}[{i}]"
        ii, ti = entry.get("interaction_index"), entry.get("turn_index")
        if not isinstance(ii, int) or not 0 <= ii < len(interactions):
            raise DataError(f"{where}: bad interaction_index {ii!r}")
        inter = interactions[ii]
        if entry.get("database_id") != inter.database_id:
            raise DataError(f"{where}: database_id {entry.get('database_id')!r} does not match interaction {ii}")
        if not isinstance(ti, int) or not 0 <= ti < len(inter.turns):
            raise DataError(f"{where}: bad turn_index {ti!r}")
        tokens = tuple(tokenize(entry.get("self_contained", "")))
        if not tokens:
            raise DataError(f"{where}: empty self_contained")
        out[(ii, ti)] = tokens
    return out


def check(parser: Model, candidate_tokens, schema: Schema, gold_sql: str, beam: int = 5) -> bool:
    """True iff any of the parser's top-beam parses of the candidate
    exact-matches the gold SQL; decode failures are False, not errors."""
    try:
        ranked = parser.predict_sql_beam([tuple(candidate_tokens)], schema, beam_size=beam)
    except ConvsqlError:
        return False
    return any(exact_match(sql, gold_sql, schema) for sql, _ in ranked)


@dataclass
class SelfTrainState:
    loops: int = 0
    sizes: list = field(default_factory=list)  # accepted-set size after each loop
    churn: list = field(default_factory=list)  # newly accepted keys per loop
    capped: bool = False


def _build_examples(
    accepted: dict,
    generated_prev: dict,
    interactions: list[Interaction],
    schemas: dict[str, Schema],
    p_sample: float,
    rng: np.random.Generator,
) -> list[CqrExample]:
    examples = []
    for (ii, ti), target in sorted(accepted.items()):
        inter = interactions[ii]
        schema = schemas[inter.database_id]
        context = [t.question for t in inter.turns[: ti + 1]]
        prev: tuple = ()
        if ti > 0:
            labeled = accepted.get((ii, ti - 1))
            sampled = generated_prev.get((ii, ti - 1))
            if labeled is not None and sampled is not None:
                prev = sampled if rng.random() < p_sample else labeled
            else:
                prev = labeled or sampled or ()
        examples.append(CqrExample(input_tokens=cqr_input_tokens(prev, context, schema), target_tokens=target))
    return examples


def _generate_all(
    model: CqrModel, interactions: list[Interaction], schemas: dict[str, Schema]
) -> dict[tuple[int, int], tuple]:
    """One reformulation per turn, recursively inheriting the previous one."""
    out: dict[tuple[int, int], tuple] = {}
    for ii, inter in enumerate(interactions):
        schema = schemas[inter.database_id]
        prev: tuple = ()
        context: list = []
        for ti, turn in enumerate(inter.turns):
            context = context + [turn.question]
            tokens = model.generate(cqr_input_tokens(prev, context, schema), allow_truncation=True)
            if not tokens:
                tokens = turn.question  # degenerate generation: fall back to the raw question
            out[(ii, ti)] = tokens
            prev = tokens
    return out


def self_train(
    seed: dict[tuple[int, int], tuple],
    interactions: list[Interaction],
    schemas: dict[str, Schema],
    parser: Model,
    cqr_config: CqrConfig,
    cqr_tcfg: CqrTrainConfig,
    loop_cap: int = 5,
    p_sample: float = 0.5,
    check_beam: int = 5,
) -> tuple[list[Interaction], SelfTrainState]:
    """Returns (dataset with a self-contained question for every turn, state)."""
    if not seed:
        raise DataError("self-training needs a non-empty seed annotation set")
    rng = np.random.default_rng(cqr_tcfg.seed)
    accepted = dict(seed)
    provenance = {key: "seed" for key in seed}
    state = SelfTrainState(sizes=[len(accepted)])
    generated: dict[tuple[int, int], tuple] = {}
    while True:
        if state.loops >= loop_cap:
            state.capped = True
            logger.warning("self-training loop cap %d reached before a fixed point", loop_cap)
            break
        examples = _build_examples(accepted, generated, interactions, schemas, p_sample, rng)
        tcfg_l = dataclasses.replace(cqr_tcfg, seed=cqr_tcfg.seed + state.loops)
        model, _ = cqr_train(examples, cqr_config, tcfg_l)
        generated = _generate_all(model, interactions, schemas)
        fresh = {}
        for (ii, ti), tokens in sorted(generated.items()):
            if (ii, ti) in accepted:
                continue
            inter = interactions[ii]
            if check(parser, tokens, schemas[inter.database_id], inter.turns[ti].gold_sql, beam=check_beam):
                fresh[(ii, ti)] = tokens
        state.loops += 1
        state.churn.append(sorted(fresh))
        before = len(accepted)
        accepted.update(fresh)
        for key in fresh:
            provenance[key] = f"accepted-loop-{state.loops}"
        state.sizes.append(len(accepted))
        logger.info(
            "self-training loop %d: accepted %d -> %d (+%d)",
            state.loops, before, len(accepted), len(fresh),
        )
        if len(accepted) == before:
            break
    merged = []
    for ii, inter in enumerate(interactions):
        turns = []
        for ti, turn in enumerate(inter.turns):
            new_turn = copy.copy(turn)
            if (ii, ti) in accepted:
                new_turn.self_contained = accepted[(ii, ti)]
                new_turn.provenance = provenance[(ii, ti)]
            else:
                new_turn.self_contained = generated[(ii, ti)]
                new_turn.provenance = "generated"
            turns.append(new_turn)
        merged.append(Interaction(database_id=inter.database_id, turns=turns))
    return merged, state
