"""Relation-aware transformer encoder over the linearized question/schema input.

Per layer and head: attention logits are Q_i (K_j + r^K_ij)^T / sqrt(d_k)
with r indexed from per-layer relation-label tables shared across heads;
values are V_j + r^V_ij; heads concatenate into a residual + LayerNorm,
followed by a two-layer ReLU feed-forward with its own residual + LayerNorm.

There is no pre-trained language model here: initial states are learned word
embeddings, and a multi-word schema item is the mean of its word embeddings
(this is the largest deliberate divergence from full-scale systems; see
README).
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .data import (
    NUM_RELATIONS,
    SEG_COLUMN,
    SEG_TABLE,
    LinearizedInput,
    RelationGraph,
    Schema,
    Vocab,
    build_relations,
    name_words,
)
from .errors import ConfigError


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    heads: int = 8
    d_model: int = 256
    d_ff: int = 0  # 0 -> 4 * d_model
    dropout: float = 0.1

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"encoder needs at least 1 layer, got {self.layers}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


def build_encoder_params(store: ParamStore, cfg: EncoderConfig, vocab_size: int) -> None:
    store.add("enc.embed", (vocab_size, cfg.d_model))
    for l in range(cfg.layers):
        p = f"enc.l{l}"
        for h in range(cfg.heads):
            store.add(f"{p}.h{h}.wq", (cfg.d_model, cfg.d_k))
            store.add(f"{p}.h{h}.wk", (cfg.d_model, cfg.d_k))
            store.add(f"{p}.h{h}.wv", (cfg.d_model, cfg.d_k))
        store.add(f"{p}.relk", (NUM_RELATIONS, cfg.d_k))
        store.add(f"{p}.relv", (NUM_RELATIONS, cfg.d_k))
        store.add(f"{p}.ln1.g", (cfg.d_model,), init="ones")
        store.add(f"{p}.ln1.b", (cfg.d_model,), init="zeros")
        store.add(f"{p}.ff1.w", (cfg.d_model, cfg.d_ff))
        store.add(f"{p}.ff1.b", (1, cfg.d_ff), init="zeros")
        store.add(f"{p}.ff2.w", (cfg.d_ff, cfg.d_model))
        store.add(f"{p}.ff2.b", (1, cfg.d_model), init="zeros")
        store.add(f"{p}.ln2.g", (cfg.d_model,), init="ones")
        store.add(f"{p}.ln2.b", (cfg.d_model,), init="zeros")


@dataclass(frozen=True)
class PreparedInput:
    """Linearized input plus everything precomputable without parameters."""

    lin: LinearizedInput
    relations: RelationGraph
    word_ids: np.ndarray  # flat word ids feeding the embedding gather
    averager: np.ndarray  # (N, len(word_ids)) sparse-ish row-averaging matrix


def prepare_input(lin: LinearizedInput, schema: Schema, vocab: Vocab) -> PreparedInput:
    relations = build_relations(lin, schema)
    word_ids: list[int] = []
    rows = []
    for i, (tok, seg) in enumerate(zip(lin.tokens, lin.segments)):
        words = name_words(tok) if seg.kind in (SEG_TABLE, SEG_COLUMN) else [tok]
        start = len(word_ids)
        word_ids.extend(vocab.ids(words))
        rows.append((start, len(words)))
    averager = np.zeros((len(lin), len(word_ids)))
    for i, (start, count) in enumerate(rows):
        averager[i, start : start + count] = 1.0 / count
    return PreparedInput(lin=lin, relations=relations, word_ids=np.asarray(word_ids, dtype=np.int64), averager=averager)


@dataclass
class EncoderOutput:
    hidden: Tensor  # (N, d_model)
    inp: LinearizedInput
    z: Tensor = field(init=False)
    table_states: Tensor = field(init=False)
    column_states: Tensor = field(init=False)
    question_states: Tensor = field(init=False)
    schema_item_states: Tensor = field(init=False)  # tables then columns, item-index order

    def __post_init__(self):
        self.z = ad.gather_rows(self.hidden, [0])
        tp = self.inp.table_positions
        cp = self.inp.column_positions
        self.table_states = ad.gather_rows(self.hidden, tp)
        self.column_states = ad.gather_rows(self.hidden, cp)
        self.question_states = ad.gather_rows(self.hidden, self.inp.positions("question"))
        self.schema_item_states = ad.gather_rows(self.hidden, tp + cp)


def embed(prep: PreparedInput, store: ParamStore, rng=None, train=False, dropout=0.0) -> Tensor:
    words = ad.gather_rows(store["enc.embed"], prep.word_ids)
    h0 = ad.matmul(Tensor(prep.averager), words)
    return ad.dropout(h0, dropout, rng, train)


def rat_layer(
    h: Tensor,
    relations: RelationGraph,
    store: ParamStore,
    layer: int,
    cfg: EncoderConfig,
    rng=None,
    train=False,
) -> Tensor:
    labels = relations.labels
    if labels.shape[0] != h.data.shape[0]:
        raise ConfigError(
            f"relation graph is {labels.shape[0]}x{labels.shape[1]} but input has {h.data.shape[0]} tokens"
        )
    p = f"enc.l{layer}"
    relk, relv = store[f"{p}.relk"], store[f"{p}.relv"]
    inv_sqrt_dk = 1.0 / np.sqrt(cfg.d_k)
    head_outputs = []
    for hd in range(cfg.heads):
        q = ad.matmul(h, store[f"{p}.h{hd}.wq"])
        k = ad.matmul(h, store[f"{p}.h{hd}.wk"])
        v = ad.matmul(h, store[f"{p}.h{hd}.wv"])
        scores = (ad.matmul(q, ad.transpose(k)) + ad.rel_scores(q, relk, labels)) * inv_sqrt_dk
        e = ad.softmax(scores, axis=-1)
        head_outputs.append(ad.matmul(e, v) + ad.rel_ctx(e, relv, labels))
    attn = ad.concat(head_outputs, axis=1)
    attn = ad.dropout(attn, cfg.dropout, rng, train)
    mid = ad.layer_norm(h + attn, store[f"{p}.ln1.g"], store[f"{p}.ln1.b"])
    ff = ad.matmul(ad.relu(ad.matmul(mid, store[f"{p}.ff1.w"]) + store[f"{p}.ff1.b"]), store[f"{p}.ff2.w"])
    ff = ff + store[f"{p}.ff2.b"]
    ff = ad.dropout(ff, cfg.dropout, rng, train)
    return ad.layer_norm(mid + ff, store[f"{p}.ln2.g"], store[f"{p}.ln2.b"])


def encode(prep: PreparedInput, store: ParamStore, cfg: EncoderConfig, rng=None, train=False) -> EncoderOutput:
    h = embed(prep, store, rng, train, cfg.dropout)
    for l in range(cfg.layers):
        h = rat_layer(h, prep.relations, store, l, cfg, rng, train)
    return EncoderOutput(hidden=h, inp=prep.lin)
