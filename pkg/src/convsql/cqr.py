"""Compact sequence-to-sequence question reformulation model.

Input per turn: the previous reformulation (empty at turn 1), a separator,
the question context joined by separators, and the schema serialization;
target: the self-contained question. Architecture: shared word embeddings,
a 2-layer LSTM encoder, a 2-layer LSTM decoder with dot-product attention
over the encoder states, trained with cross-entropy and decoded with a
small beam.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BOS, EOS, SEP, Schema, Vocab, name_words
from .errors import ConfigError, DataError, DecodeBudgetExceeded


@dataclass(frozen=True)
class CqrConfig:
    vocab_tokens: tuple
    d_model: int = 256
    layers: int = 2
    max_len: int = 40
    beam: int = 5
    dropout: float = 0.0

    def to_dict(self) -> dict:
        return {
            "kind": "cqr",
            "vocab_tokens": list(self.vocab_tokens),
            "d_model": self.d_model,
            "layers": self.layers,
            "max_len": self.max_len,
            "beam": self.beam,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CqrConfig":
        if d.get("kind") != "cqr":
            raise ConfigError(f"not a reformulator config (kind={d.get('kind')!r})")
        return cls(
            vocab_tokens=tuple(d["vocab_tokens"]),
            d_model=int(d["d_model"]),
            layers=int(d["layers"]),
            max_len=int(d["max_len"]),
            beam=int(d["beam"]),
            dropout=float(d["dropout"]),
        )


@dataclass(frozen=True)
class CqrExample:
    input_tokens: tuple
    target_tokens: tuple

    def __post_init__(self):
        if not self.target_tokens:
            raise DataError("reformulation target must be non-empty")


def schema_words(schema: Schema) -> list[str]:
    """Table-first serialization with separators between table groups."""
    out: list[str] = []
    for t in range(len(schema.tables)):
        if t > 0:
            out.append(SEP)
        out.extend(name_words(schema.tables[t]))
        for c in schema.columns_of(t):
            out.extend(name_words(schema.columns[c].name))
    return out


def cqr_input_tokens(prev_reformulation, context_turns, schema: Schema) -> tuple:
    """{previous reformulation, [sep], q1 [sep] ... q_tau [sep] schema}."""
    toks: list[str] = list(prev_reformulation or ())
    toks.append(SEP)
    for q in context_turns:
        toks.extend(q)
        toks.append(SEP)
    toks.extend(schema_words(schema))
    return tuple(toks)


class CqrModel:
    def __init__(self, config: CqrConfig, params: ParamStore):
        self.config = config
        self.params = params
        self.vocab = Vocab(list(config.vocab_tokens))

    @classmethod
    def new(cls, config: CqrConfig, seed: int) -> "CqrModel":
        store = ParamStore(seed=seed)
        d = config.d_model
        store.add("cqr.embed", (len(config.vocab_tokens), d))
        for side in ("enc", "dec"):
            for l in range(config.layers):
                store.add(f"cqr.{side}.l{l}.wx", (d, 4 * d))
                store.add(f"cqr.{side}.l{l}.wh", (d, 4 * d))
                store.add(f"cqr.{side}.l{l}.b", (1, 4 * d), init="zeros")
        store.add("cqr.out.w", (2 * d, len(config.vocab_tokens)))
        store.add("cqr.out.b", (1, len(config.vocab_tokens)), init="zeros")
        return cls(config, store)

    def save(self, path: str) -> None:
        save_checkpoint(self.params, self.config.to_dict(), path)

    @classmethod
    def load(cls, path: str) -> "CqrModel":
        store, config_dict = load_checkpoint(path)
        return cls(CqrConfig.from_dict(config_dict), store)

    # -- forward pieces -------------------------------------------------------

    def _run_stack(self, side: str, x: Tensor, states: list) -> tuple[Tensor, list]:
        new_states = []
        inp = x
        for l in range(self.config.layers):
            c, h = states[l]
            c2, h2 = ad.lstm_cell(
                inp, c, h,
                self.params[f"cqr.{side}.l{l}.wx"],
                self.params[f"cqr.{side}.l{l}.wh"],
                self.params[f"cqr.{side}.l{l}.b"],
            )
            new_states.append((c2, h2))
            inp = h2
        return inp, new_states

    def _zero_states(self) -> list:
        d = self.config.d_model
        return [(Tensor(np.zeros((1, d))), Tensor(np.zeros((1, d)))) for _ in range(self.config.layers)]

    def encode(self, tokens) -> tuple[Tensor, list]:
        """Top-layer states per input position plus the final stack state."""
        embed = self.params["cqr.embed"]
        states = self._zero_states()
        tops = []
        for tok in tokens:
            x = ad.gather_rows(embed, [self.vocab.id(tok)])
            top, states = self._run_stack("enc", x, states)
            tops.append(top)
        return ad.concat(tops, axis=0), states

    def _step(self, prev_id: int, states: list, enc_states: Tensor) -> tuple[Tensor, list]:
        x = ad.gather_rows(self.params["cqr.embed"], [prev_id])
        top, states = self._run_stack("dec", x, states)
        scale = 1.0 / np.sqrt(self.config.d_model)
        attn = ad.softmax(ad.matmul(top, ad.transpose(enc_states)) * scale, axis=-1)
        ctx = ad.matmul(attn, enc_states)
        logits = ad.matmul(ad.concat([top, ctx], axis=1), self.params["cqr.out.w"]) + self.params["cqr.out.b"]
        return logits, states

    def example_loss(self, example: CqrExample) -> tuple[Tensor, int, int]:
        """Teacher-forced cross entropy; returns (loss, #correct, #tokens)."""
        if len(example.target_tokens) + 1 > self.config.max_len:
            raise DataError(
                f"target length {len(example.target_tokens)} exceeds cap {self.config.max_len - 1}"
            )
        enc_states, final = self.encode(example.input_tokens)
        states = final
        prev = self.vocab.id(BOS)
        total = Tensor(np.zeros(()))
        correct = 0
        targets = [self.vocab.id(t) for t in example.target_tokens] + [self.vocab.id(EOS)]
        for tid in targets:
            logits, states = self._step(prev, states, enc_states)
            probs = ad.softmax(logits, axis=-1)
            total = total + ad.neg(ad.log(ad.pick(probs, 0, tid)))
            correct += int(np.argmax(logits.data[0]) == tid)
            prev = tid
        return total, correct, len(targets)

    def generate(self, input_tokens, allow_truncation: bool = False) -> tuple:
        """Beam-decoded best reformulation; deterministic.

        Raises DecodeBudgetExceeded when nothing emits the end symbol within
        the length cap, unless allow_truncation returns the best prefix.
        """
        enc_states, final = self.encode(input_tokens)
        eos = self.vocab.id(EOS)
        beams = [(0.0, (), self.vocab.id(BOS), final)]
        completed: list[tuple[float, tuple]] = []
        for _ in range(self.config.max_len):
            candidates = []
            for lp, toks, prev, states in beams:
                logits, new_states = self._step(prev, states, enc_states)
                logprobs = np.log(np.maximum(ad.softmax(logits, axis=-1).data[0], 1e-300))
                top = np.argsort(-logprobs, kind="stable")[: self.config.beam]
                for tid in top:
                    candidates.append((lp + float(logprobs[tid]), toks + (int(tid),), new_states))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            beams = []
            for lp, toks, states in candidates[: self.config.beam]:
                if toks[-1] == eos:
                    completed.append((lp, toks[:-1]))
                else:
                    beams.append((lp, toks, toks[-1], states))
            if not beams:
                break
        if not completed:
            if allow_truncation and beams:
                best = min(beams, key=lambda b: (-b[0], b[1]))
                return tuple(self.vocab.tokens[t] for t in best[1])
            raise DecodeBudgetExceeded(f"no end symbol within {self.config.max_len} tokens")
        completed.sort(key=lambda c: (-c[0], c[1]))
        return tuple(self.vocab.tokens[t] for t in completed[0][1])


@dataclass
class CqrTrainConfig:
    lr: float = 2e-3
    epochs: int = 60
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("bad reformulator training config")


def cqr_train(examples: list[CqrExample], config: CqrConfig, tcfg: CqrTrainConfig) -> tuple[CqrModel, list[dict]]:
    """Cross-entropy training; returns the model and per-epoch metrics."""
    from .training import Adam

    if not examples:
        raise DataError("no reformulation examples to train on")
    model = CqrModel.new(config, seed=tcfg.seed)
    adam = Adam(lr=tcfg.lr)
    rng = np.random.default_rng(tcfg.seed)
    metrics = []
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(examples))
        loss_sum = 0.0
        correct = 0
        total = 0
        for start in range(0, len(order), tcfg.batch_size):
            batch = [examples[i] for i in order[start : start + tcfg.batch_size]]
            model.params.zero_grad()
            for ex in batch:
                loss, c, t = model.example_loss(ex)
                ad.backward(loss)
                loss_sum += loss.item()
                correct += c
                total += t
            adam.step(model.params, scale=1.0 / len(batch))
        metrics.append({"epoch": epoch, "loss": loss_sum / total, "token_accuracy": correct / total})
    return model, metrics
