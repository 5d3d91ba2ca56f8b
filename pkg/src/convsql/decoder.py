"""Tree-structured LSTM decoder: per-step action distributions, teacher
forcing, and beam search under grammar masks.

The LSTM input at step t concatenates the previous action embedding, the
LSTM output and action embedding of the step that created the frontier node,
and the frontier node-type embedding; learned placeholder vectors stand in
at the first step. The hidden state attends over the encoder states
(multi-head) and a shared two-layer tanh MLP feeds three output heads:
rule logits, and bilinear table / column logits against the encoder states
of schema items. Illegal actions are masked out before the softmax, which
renormalizes the legal ones.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import grammar as gr
from .autodiff import ParamStore, Tensor
from .encoder import EncoderConfig, EncoderOutput
from .errors import ConfigError, DecodeBudgetExceeded, GrammarError

_NEG_INF = -1e30


@dataclass(frozen=True)
class DecoderConfig:
    d_lstm: int = 256
    d_action: int = 128
    d_node: int = 64
    d_mlp: int = 256
    heads: int = 8
    dropout: float = 0.2

    def validate(self, enc: EncoderConfig) -> None:
        if enc.d_model % self.heads != 0:
            raise ConfigError(f"decoder heads ({self.heads}) must divide encoder width ({enc.d_model})")


def build_decoder_params(store: ParamStore, cfg: DecoderConfig, enc: EncoderConfig, g: gr.Grammar) -> None:
    cfg.validate(enc)
    d_in = cfg.d_action + cfg.d_lstm + cfg.d_action + cfg.d_node
    store.add("dec.init.w1", (enc.d_model, enc.d_model))
    store.add("dec.init.att", (1, enc.d_model))
    store.add("dec.init.w2", (enc.d_model, cfg.d_lstm))
    store.add("dec.lstm.wx", (d_in, 4 * cfg.d_lstm))
    store.add("dec.lstm.wh", (cfg.d_lstm, 4 * cfg.d_lstm))
    store.add("dec.lstm.b", (1, 4 * cfg.d_lstm), init="zeros")
    store.add("dec.a0", (1, cfg.d_action))
    store.add("dec.hp0", (1, cfg.d_lstm))
    store.add("dec.ap0", (1, cfg.d_action))
    store.add("dec.node_embed", (len(g.symbols), cfg.d_node))
    store.add("dec.rule_embed", (len(g), cfg.d_action))
    store.add("dec.colsel.w", (enc.d_model, cfg.d_action))
    store.add("dec.tabsel.w", (enc.d_model, cfg.d_action))
    store.add("dec.valsel", (1, cfg.d_action))
    dk = enc.d_model // cfg.heads
    for h in range(cfg.heads):
        store.add(f"dec.att.h{h}.wq", (cfg.d_lstm, dk))
        store.add(f"dec.att.h{h}.wk", (enc.d_model, dk))
        store.add(f"dec.att.h{h}.wv", (enc.d_model, dk))
    store.add("dec.att.wo", (enc.d_model, enc.d_model))
    store.add("dec.mlp.w1", (cfg.d_lstm + enc.d_model, cfg.d_mlp))
    store.add("dec.mlp.b1", (1, cfg.d_mlp), init="zeros")
    store.add("dec.mlp.w2", (cfg.d_mlp, cfg.d_mlp))
    store.add("dec.mlp.b2", (1, cfg.d_mlp), init="zeros")
    store.add("dec.wr", (cfg.d_mlp, len(g)))
    store.add("dec.wt", (cfg.d_mlp, enc.d_model))
    store.add("dec.wc", (cfg.d_mlp, enc.d_model))


@dataclass
class DecoderState:
    c: Tensor
    h: Tensor
    ast: gr.AstState
    history_h: list
    history_a: list

    @property
    def step(self) -> int:
        return self.ast.step

    def clone(self) -> "DecoderState":
        return DecoderState(self.c, self.h, self.ast.clone(), list(self.history_h), list(self.history_a))


@dataclass
class StepDistributions:
    """Per-step distributions; heads other than the frontier's are inactive (None)."""

    active: str  # "rule" | "table" | "column" | "value"
    rule_dist: Optional[Tensor]
    table_dist: Optional[Tensor]
    column_dist: Optional[Tensor]
    frontier: str

    def active_dist(self) -> Optional[Tensor]:
        return {"rule": self.rule_dist, "table": self.table_dist, "column": self.column_dist, "value": None}[
            self.active
        ]

    def gold_logprob(self, action: gr.Action) -> Tensor:
        if isinstance(action, gr.ApplyRule):
            if self.active != "rule":
                raise GrammarError(f"gold ApplyRule at a {self.active} step")
            return ad.log(ad.pick(self.rule_dist, 0, action.rule))
        if isinstance(action, gr.SelectTable):
            if self.active != "table":
                raise GrammarError(f"gold SelectTable at a {self.active} step")
            return ad.log(ad.pick(self.table_dist, 0, action.table))
        if isinstance(action, gr.SelectColumn):
            if self.active != "column":
                raise GrammarError(f"gold SelectColumn at a {self.active} step")
            return ad.log(ad.pick(self.column_dist, 0, action.column))
        if self.active != "value":
            raise GrammarError(f"gold SelectValue at a {self.active} step")
        return Tensor(np.zeros(()))  # single placeholder: probability 1


def init_state(enc: EncoderOutput, store: ParamStore, cfg: DecoderConfig, g: gr.Grammar, n_tables: int, n_columns: int) -> DecoderState:
    pooled = ad.tanh(ad.matmul(enc.hidden, store["dec.init.w1"]))  # (N, d_model)
    scores = ad.transpose(ad.matmul(pooled, ad.transpose(store["dec.init.att"])))  # (1, N)
    weights = ad.softmax(scores, axis=-1)
    attended = ad.matmul(weights, enc.hidden)  # (1, d_model)
    h0 = ad.tanh(ad.matmul(attended, store["dec.init.w2"]))
    c0 = Tensor(np.zeros((1, cfg.d_lstm)))
    return DecoderState(c=c0, h=h0, ast=gr.AstState(g, n_tables, n_columns), history_h=[], history_a=[])


@dataclass
class AttentionCache:
    """Per-encoding key/value projections, shared across all decode steps."""

    keys_t: list  # transposed key matrix per head
    values: list
    scale: float


def build_attention_cache(enc: EncoderOutput, store: ParamStore, cfg: DecoderConfig) -> AttentionCache:
    dk = enc.hidden.data.shape[1] // cfg.heads
    keys_t = [ad.transpose(ad.matmul(enc.hidden, store[f"dec.att.h{hd}.wk"])) for hd in range(cfg.heads)]
    values = [ad.matmul(enc.hidden, store[f"dec.att.h{hd}.wv"]) for hd in range(cfg.heads)]
    return AttentionCache(keys_t=keys_t, values=values, scale=1.0 / np.sqrt(dk))


def _context_attention(h: Tensor, cache: AttentionCache, store: ParamStore, cfg: DecoderConfig) -> Tensor:
    outs = []
    for hd in range(cfg.heads):
        q = ad.matmul(h, store[f"dec.att.h{hd}.wq"])
        e = ad.softmax(ad.matmul(q, cache.keys_t[hd]) * cache.scale, axis=-1)
        outs.append(ad.matmul(e, cache.values[hd]))
    return ad.matmul(ad.concat(outs, axis=1), store["dec.att.wo"])


def decode_step(
    state: DecoderState,
    enc: EncoderOutput,
    store: ParamStore,
    cfg: DecoderConfig,
    rng=None,
    train: bool = False,
    cache: AttentionCache = None,
):
    """Distributions for the next action; returns (StepDistributions, (c_t, h_t))."""
    ast = state.ast
    if ast.complete:
        raise GrammarError("decode_step on a complete tree")
    if cache is None:
        cache = build_attention_cache(enc, store, cfg)
    g = ast.grammar
    a_prev = state.history_a[-1] if state.history_a else store["dec.a0"]
    p = ast.frontier_parent_step
    if p < 0:
        h_par, a_par = store["dec.hp0"], store["dec.ap0"]
    else:
        h_par, a_par = state.history_h[p], state.history_a[p]
    symbol = ast.frontier_symbol
    n_f = ad.gather_rows(store["dec.node_embed"], [g.symbol_index[symbol]])
    x = ad.concat([a_prev, h_par, a_par, n_f], axis=1)
    x = ad.dropout(x, cfg.dropout, rng, train)
    c_t, h_t = ad.lstm_cell(x, state.c, state.h, store["dec.lstm.wx"], store["dec.lstm.wh"], store["dec.lstm.b"])
    h_ctx = _context_attention(h_t, cache, store, cfg)
    feat_in = ad.dropout(ad.concat([h_t, h_ctx], axis=1), cfg.dropout, rng, train)
    feat = ad.matmul(ad.tanh(ad.matmul(feat_in, store["dec.mlp.w1"]) + store["dec.mlp.b1"]), store["dec.mlp.w2"])
    feat = feat + store["dec.mlp.b2"]

    rule_dist = table_dist = column_dist = None
    if symbol == gr.COL:
        active = "column"
        logits = ad.matmul(ad.matmul(feat, store["dec.wc"]), ad.transpose(enc.column_states))
        column_dist = ad.softmax(logits, axis=-1)
    elif symbol == gr.TAB:
        active = "table"
        logits = ad.matmul(ad.matmul(feat, store["dec.wt"]), ad.transpose(enc.table_states))
        table_dist = ad.softmax(logits, axis=-1)
    elif symbol == gr.VAL:
        active = "value"
    else:
        active = "rule"
        logits = ad.matmul(feat, store["dec.wr"])
        mask = np.full((1, len(g)), _NEG_INF)
        for r in g.by_lhs[symbol]:
            mask[0, r.id] = 0.0
        rule_dist = ad.softmax(logits + Tensor(mask), axis=-1)
    dists = StepDistributions(
        active=active, rule_dist=rule_dist, table_dist=table_dist, column_dist=column_dist, frontier=symbol
    )
    return dists, (c_t, h_t)


def embed_action(action: gr.Action, enc: EncoderOutput, store: ParamStore) -> Tensor:
    if isinstance(action, gr.ApplyRule):
        return ad.gather_rows(store["dec.rule_embed"], [action.rule])
    if isinstance(action, gr.SelectColumn):
        return ad.matmul(ad.gather_rows(enc.column_states, [action.column]), store["dec.colsel.w"])
    if isinstance(action, gr.SelectTable):
        return ad.matmul(ad.gather_rows(enc.table_states, [action.table]), store["dec.tabsel.w"])
    return store["dec.valsel"]


def advance(state: DecoderState, cnh, action: gr.Action, enc: EncoderOutput, store: ParamStore) -> DecoderState:
    """Apply `action` after a decode_step, producing the next state."""
    c_t, h_t = cnh
    new = state.clone()
    new.c, new.h = c_t, h_t
    new.history_h.append(h_t)
    new.history_a.append(embed_action(action, enc, store))
    new.ast.apply(action)
    return new


def teacher_forced_trace(
    enc: EncoderOutput,
    gold: list,
    store: ParamStore,
    cfg: DecoderConfig,
    g: gr.Grammar,
    n_tables: int,
    n_columns: int,
    rng=None,
    train: bool = False,
) -> list[StepDistributions]:
    """One StepDistributions per gold action, conditioning on the gold prefix."""
    state = init_state(enc, store, cfg, g, n_tables, n_columns)
    cache = build_attention_cache(enc, store, cfg)
    trace = []
    for t, action in enumerate(gold):
        if state.ast.complete:
            raise GrammarError(f"gold step {t}: actions after completion")
        dists, cnh = decode_step(state, enc, store, cfg, rng, train, cache)
        try:
            state = advance(state, cnh, action, enc, store)
        except GrammarError as exc:
            raise GrammarError(f"gold step {t}: {exc}") from exc
        trace.append(dists)
    if not state.ast.complete:
        raise GrammarError(f"gold sequence leaves an incomplete tree after {len(gold)} steps")
    return trace


@dataclass
class BeamHypothesis:
    state: DecoderState
    log_prob: float
    action_ids: tuple  # lexicographic tie-break key
    actions: list

    @property
    def sort_key(self):
        return (-self.log_prob, self.action_ids)


def beam_search(
    enc: EncoderOutput,
    store: ParamStore,
    cfg: DecoderConfig,
    g: gr.Grammar,
    n_tables: int,
    n_columns: int,
    beam_size: int = 5,
    max_steps: int = 120,
) -> list[tuple[list, float]]:
    """Ranked completed action sequences (at most beam_size of them).

    Hypotheses expand only through grammar-legal actions; ties in total
    log-probability break toward the lexicographically smaller action-id
    sequence. Raises DecodeBudgetExceeded if nothing completes in max_steps.
    """
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")
    space = gr.ActionSpace(g, n_tables, n_columns)
    cache = build_attention_cache(enc, store, cfg)
    start = BeamHypothesis(
        state=init_state(enc, store, cfg, g, n_tables, n_columns), log_prob=0.0, action_ids=(), actions=[]
    )
    active = [start]
    completed: list[BeamHypothesis] = []
    for _ in range(max_steps):
        if not active:
            break
        candidates = []
        for hyp in active:
            dists, cnh = decode_step(hyp.state, enc, store, cfg, cache=cache)
            if dists.active == "value":
                options = [(gr.SelectValue(0), 0.0)]
            else:
                probs = dists.active_dist().data[0]
                if dists.active == "rule":
                    legal = [r.id for r in g.by_lhs[dists.frontier]]
                    options = [(gr.ApplyRule(r), float(np.log(max(probs[r], 1e-300)))) for r in legal]
                elif dists.active == "table":
                    options = [
                        (gr.SelectTable(i), float(np.log(max(probs[i], 1e-300)))) for i in range(n_tables)
                    ]
                else:
                    options = [
                        (gr.SelectColumn(i), float(np.log(max(probs[i], 1e-300)))) for i in range(n_columns)
                    ]
            for action, lp in options:
                candidates.append((hyp, cnh, action, hyp.log_prob + lp))
        scored = []
        for hyp, cnh, action, lp in candidates:
            ids = hyp.action_ids + (space.id_of(action),)
            scored.append((-lp, ids, hyp, cnh, action))
        scored.sort(key=lambda item: (item[0], item[1]))
        active = []
        for neg_lp, ids, hyp, cnh, action in scored[:beam_size]:
            new = BeamHypothesis(
                state=advance(hyp.state, cnh, action, enc, store),
                log_prob=-neg_lp,
                action_ids=ids,
                actions=hyp.actions + [action],
            )
            if new.state.ast.complete:
                completed.append(new)
            else:
                active.append(new)
    if not completed:
        raise DecodeBudgetExceeded(f"no complete sequence within {max_steps} steps")
    completed.sort(key=lambda h: h.sort_key)
    return [(h.actions, h.log_prob) for h in completed[:beam_size]]
