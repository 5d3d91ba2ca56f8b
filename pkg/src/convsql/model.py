"""Full parser model: configuration, parameter construction, inference."""

from dataclasses import asdict, dataclass, field

from . import decoder as dec
from . import encoder as enc
from . import grammar as gr
from .autodiff import ParamStore
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Schema, Vocab
from .errors import CheckpointError, ConfigError


@dataclass(frozen=True)
class ModelConfig:
    vocab_tokens: tuple
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    decoder: dec.DecoderConfig = field(default_factory=dec.DecoderConfig)
    max_steps: int = 120

    def to_dict(self) -> dict:
        return {
            "kind": "parser",
            "vocab_tokens": list(self.vocab_tokens),
            "encoder": asdict(self.encoder),
            "decoder": asdict(self.decoder),
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        if d.get("kind") != "parser":
            raise ConfigError(f"not a parser config (kind={d.get('kind')!r})")
        return cls(
            vocab_tokens=tuple(d["vocab_tokens"]),
            encoder=enc.EncoderConfig(**d["encoder"]),
            decoder=dec.DecoderConfig(**d["decoder"]),
            max_steps=int(d["max_steps"]),
        )


class Model:
    """Bundles config, vocabulary, grammar and the parameter store."""

    def __init__(self, config: ModelConfig, params: ParamStore, grammar: gr.Grammar = gr.DEFAULT_GRAMMAR):
        self.config = config
        self.params = params
        self.grammar = grammar
        self.vocab = Vocab(list(config.vocab_tokens))

    @classmethod
    def new(cls, config: ModelConfig, seed: int, grammar: gr.Grammar = gr.DEFAULT_GRAMMAR) -> "Model":
        store = ParamStore(seed=seed)
        enc.build_encoder_params(store, config.encoder, len(config.vocab_tokens))
        dec.build_decoder_params(store, config.decoder, config.encoder, grammar)
        store.add("loss.wsg", (config.encoder.d_model, config.encoder.d_model))
        return cls(config, store, grammar)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        save_checkpoint(self.params, self.config.to_dict(), path)

    @classmethod
    def load(cls, path: str, grammar: gr.Grammar = gr.DEFAULT_GRAMMAR) -> "Model":
        store, config_dict = load_checkpoint(path)
        config = ModelConfig.from_dict(config_dict)
        expected = cls.new(config, seed=store.seed, grammar=grammar)
        for name, t in expected.params.trainable():
            if name not in store:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            if store[name].data.shape != t.data.shape:
                raise CheckpointError(
                    f"shape mismatch for parameter {name!r}: checkpoint "
                    f"{store[name].data.shape} vs config {t.data.shape}"
                )
        for name in store.names():
            if name not in expected.params:
                raise CheckpointError(f"checkpoint has unexpected parameter {name!r}")
        return cls(config, store, grammar)

    # -- inference -----------------------------------------------------------

    def prepare(self, question_turns, schema: Schema) -> enc.PreparedInput:
        from .data import linearize

        return enc.prepare_input(linearize(question_turns, schema), schema, self.vocab)

    def encode(self, prep: enc.PreparedInput, rng=None, train: bool = False) -> enc.EncoderOutput:
        return enc.encode(prep, self.params, self.config.encoder, rng, train)

    def encode_turns(self, question_turns, schema: Schema, rng=None, train: bool = False) -> enc.EncoderOutput:
        return self.encode(self.prepare(question_turns, schema), rng, train)

    def trace(self, encoded: enc.EncoderOutput, gold_actions, schema: Schema, rng=None, train: bool = False):
        return dec.teacher_forced_trace(
            encoded,
            gold_actions,
            self.params,
            self.config.decoder,
            self.grammar,
            len(schema.tables),
            len(schema.columns),
            rng,
            train,
        )

    def beam(self, encoded: enc.EncoderOutput, schema: Schema, beam_size: int = 5):
        return dec.beam_search(
            encoded,
            self.params,
            self.config.decoder,
            self.grammar,
            len(schema.tables),
            len(schema.columns),
            beam_size=beam_size,
            max_steps=self.config.max_steps,
        )

    def predict_sql(self, question_turns, schema: Schema, beam_size: int = 5) -> tuple[str, float]:
        encoded = self.encode_turns(question_turns, schema)
        ranked = self.beam(encoded, schema, beam_size)
        actions, log_prob = ranked[0]
        return gr.actions_to_sql(actions, schema, self.grammar), log_prob

    def predict_sql_beam(self, question_turns, schema: Schema, beam_size: int = 5) -> list[tuple[str, float]]:
        encoded = self.encode_turns(question_turns, schema)
        out = []
        for actions, log_prob in self.beam(encoded, schema, beam_size):
            out.append((gr.actions_to_sql(actions, schema, self.grammar), log_prob))
        return out
