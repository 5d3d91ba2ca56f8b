"""Command-line interface.

Subcommands: train, eval, predict, cqr-train, cqr-selftrain, grad-check,
roundtrip, schema-lint. Exit codes: 0 success, 1 runtime failure, 2 bad
usage. All randomness is seeded via --seed.
"""

import argparse
import logging
import sys

import numpy as np

from . import autodiff as ad
from .cqr import CqrConfig, CqrExample, CqrTrainConfig, cqr_input_tokens, cqr_train
from .data import load_interactions, load_schemas, save_interactions
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConvsqlError
from .evaluation import evaluate, predict_interactions
from .model import Model, ModelConfig
from .sqltext import normalize_sql
from .training import TrainConfig, train

logger = logging.getLogger("convsql")


def _add_data_args(p, with_dev=False):
    p.add_argument("--data", required=True, help="interaction JSON file")
    p.add_argument("--schema", required=True, help="schema JSON file")
    if with_dev:
        p.add_argument("--dev", help="optional dev interaction JSON file")


def _add_size_args(p):
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--d-model", type=int, default=256)
    p.add_argument("--d-ff", type=int, default=0, help="0 = 4 * d_model")
    p.add_argument("--d-lstm", type=int, default=256)
    p.add_argument("--d-action", type=int, default=128)
    p.add_argument("--d-node", type=int, default=64)
    p.add_argument("--d-mlp", type=int, default=256)
    p.add_argument("--enc-dropout", type=float, default=0.1)
    p.add_argument("--dec-dropout", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="convsql", description=__doc__)
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a parser with the dual-input consistency objective")
    _add_data_args(p, with_dev=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--lambda1", type=float, default=0.1)
    p.add_argument("--lambda2", type=float, default=3.0)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--eval-beam", type=int, default=1)
    p.add_argument("--metrics-log", help="JSON-lines metrics output path")
    p.add_argument("--no-bow", action="store_true", help="drop the schema grounding BoW task")
    p.add_argument("--no-sg-kl", action="store_true", help="drop the grounding consistency term")
    p.add_argument("--no-sp-kl", action="store_true", help="drop the parsing consistency term")
    _add_size_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="exact-match evaluation with turn/difficulty breakdowns")
    _add_data_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="emit one predicted SQL per line, interaction/turn ordered")
    _add_data_args(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cqr-train", help="train the question reformulator on annotated turns")
    _add_data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-model", type=int, default=256)
    p.add_argument("--cqr-layers", type=int, default=2)
    p.add_argument("--max-len", type=int, default=40)
    p.set_defaults(func=cmd_cqr_train)

    p = sub.add_parser("cqr-selftrain", help="grow the reformulation set with the verifier loop")
    _add_data_args(p)
    p.add_argument("--seeds", required=True, help="seed annotation JSON file")
    p.add_argument("--parser-ckpt", required=True, help="frozen single-turn parser checkpoint")
    p.add_argument("--out", required=True, help="output interaction file with reformulations")
    p.add_argument("--loop-cap", type=int, default=5)
    p.add_argument("--check-beam", type=int, default=5)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-model", type=int, default=256)
    p.add_argument("--cqr-layers", type=int, default=2)
    p.add_argument("--max-len", type=int, default=40)
    p.set_defaults(func=cmd_cqr_selftrain)

    p = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--entries", type=int, default=2, help="sampled entries per parameter tensor")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("roundtrip", help="grammar round-trip over a corpus file (db_id|SQL per line)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("schema-lint", help="validate a schema file's invariants")
    p.add_argument("--schema", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_schema_lint)
    return root


def _model_config_from_args(args, vocab_tokens) -> ModelConfig:
    return ModelConfig(
        vocab_tokens=tuple(vocab_tokens),
        encoder=EncoderConfig(
            layers=args.layers, heads=args.heads, d_model=args.d_model, d_ff=args.d_ff, dropout=args.enc_dropout
        ),
        decoder=DecoderConfig(
            d_lstm=args.d_lstm,
            d_action=args.d_action,
            d_node=args.d_node,
            d_mlp=args.d_mlp,
            heads=args.heads,
            dropout=args.dec_dropout,
        ),
    )


def cmd_train(args) -> int:
    from .data import Vocab

    schemas = load_schemas(args.schema)
    interactions = load_interactions(args.data, schemas)
    dev = load_interactions(args.dev, schemas) if args.dev else None
    vocab = Vocab.for_dataset(interactions + (dev or []), schemas)
    model = Model.new(_model_config_from_args(args, vocab.tokens), seed=args.seed)
    cfg = TrainConfig(
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        seed=args.seed,
        eval_every=args.eval_every,
        eval_beam=args.eval_beam,
        use_bow=not args.no_bow,
        use_sg_kl=not args.no_sg_kl,
        use_sp_kl=not args.no_sp_kl,
        metrics_path=args.metrics_log,
    )
    metrics = train(model, interactions, schemas, cfg, dev_interactions=dev)
    model.save(args.out)
    last = metrics[-1]
    print(f"trained {len(metrics)} epochs; final total {last.total:.4f} dev QM {last.dev_qm}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    schemas = load_schemas(args.schema)
    interactions = load_interactions(args.data, schemas)
    model = Model.load(args.ckpt)
    report = evaluate(model, interactions, schemas, beam=args.beam, seed=args.seed)
    print(report.to_text() if args.format == "text" else report.to_json())
    return 0


def cmd_predict(args) -> int:
    schemas = load_schemas(args.schema)
    interactions = load_interactions(args.data, schemas)
    model = Model.load(args.ckpt)
    predictions = predict_interactions(model, interactions, schemas, beam=args.beam)
    lines = [sql if sql is not None else "" for preds in predictions for sql in preds]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cqr_examples_from(interactions, schemas):
    examples = []
    for inter in interactions:
        schema = schemas[inter.database_id]
        context = []
        prev = ()
        for turn in inter.turns:
            context = context + [turn.question]
            if turn.self_contained:
                examples.append(
                    CqrExample(
                        input_tokens=cqr_input_tokens(prev, context, schema),
                        target_tokens=tuple(turn.self_contained),
                    )
                )
                prev = tuple(turn.self_contained)
            else:
                prev = ()
    return examples


def _cqr_vocab(interactions, schemas):
    from .data import Vocab

    return Vocab.for_dataset(interactions, schemas)


def cmd_cqr_train(args) -> int:
    schemas = load_schemas(args.schema)
    interactions = load_interactions(args.data, schemas)
    examples = _cqr_examples_from(interactions, schemas)
    vocab = _cqr_vocab(interactions, schemas)
    config = CqrConfig(
        vocab_tokens=tuple(vocab.tokens), d_model=args.d_model, layers=args.cqr_layers, max_len=args.max_len
    )
    tcfg = CqrTrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed)
    model, metrics = cqr_train(examples, config, tcfg)
    model.save(args.out)
    print(f"trained on {len(examples)} examples; final token accuracy {metrics[-1]['token_accuracy']:.4f}")
    return 0


def cmd_cqr_selftrain(args) -> int:
    from .selftrain import load_seed_annotations, self_train

    schemas = load_schemas(args.schema)
    interactions = load_interactions(args.data, schemas)
    seeds = load_seed_annotations(args.seeds, interactions)
    parser_model = Model.load(args.parser_ckpt)
    vocab = _cqr_vocab(interactions, schemas)
    config = CqrConfig(
        vocab_tokens=tuple(vocab.tokens), d_model=args.d_model, layers=args.cqr_layers, max_len=args.max_len
    )
    tcfg = CqrTrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed)
    merged, state = self_train(
        seeds,
        interactions,
        schemas,
        parser_model,
        config,
        tcfg,
        loop_cap=args.loop_cap,
        check_beam=args.check_beam,
    )
    save_interactions(args.out, merged)
    print(f"loops: {state.loops}  accepted sizes: {state.sizes}  capped: {state.capped}")
    print(f"reformulated dataset written to {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    from .fixtures import load_fixture_schemas, load_train_interactions
    from .losses import build_examples, total_loss

    schemas = load_fixture_schemas()
    interactions = [load_train_interactions(schemas)[3]]  # the bundled 2-turn interaction
    from .data import Vocab

    vocab = Vocab.for_dataset(interactions, schemas)
    config = ModelConfig(
        vocab_tokens=tuple(vocab.tokens),
        encoder=EncoderConfig(layers=1, heads=2, d_model=16, d_ff=32, dropout=0.0),
        decoder=DecoderConfig(d_lstm=16, d_action=8, d_node=8, d_mlp=16, heads=2, dropout=0.0),
    )
    model = Model.new(config, seed=args.seed)
    examples = build_examples(interactions, schemas, model)

    def loss_fn():
        total = None
        for ex in examples:
            enc_ctx = model.encode(ex.prep_ctx)
            enc_self = model.encode(ex.prep_self) if ex.prep_self is not None else None
            b = total_loss(ex, enc_ctx, enc_self, model, 0.1, 1.0)
            total = b.total_tensor if total is None else total + b.total_tensor
        return total

    report = ad.grad_check(
        loss_fn, model.params, step=args.step, tolerance=args.tolerance, max_entries_per_param=args.entries
    )
    print(report.summary())
    return 0 if report.passed else 1


def cmd_roundtrip(args) -> int:
    from . import grammar as gr

    schemas = load_schemas(args.schema)
    failures = []
    total = 0
    with open(args.corpus, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            total += 1
            db_id, sql = line.split("|", 1)
            if db_id not in schemas:
                failures.append((sql, f"unknown db {db_id!r}"))
                continue
            schema = schemas[db_id]
            try:
                back = gr.actions_to_sql(gr.sql_to_actions(sql, schema), schema)
                if normalize_sql(back, schema) != normalize_sql(sql, schema):
                    failures.append((sql, back))
            except ConvsqlError as exc:
                failures.append((sql, repr(exc)))
    if failures:
        for sql, why in failures:
            print(f"FAIL: {sql}\n  -> {why}")
        print(f"{len(failures)}/{total} queries failed round-trip")
        return 1
    print(f"100% round-trip on {total} queries")
    return 0


def cmd_schema_lint(args) -> int:
    schemas = load_schemas(args.schema)  # raises DataError on any violation
    for db_id, schema in schemas.items():
        print(f"{db_id}: {len(schema.tables)} tables, {len(schema.columns)} columns, "
              f"{len(schema.foreign_keys)} foreign keys - ok")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    rng_seed = getattr(args, "seed", 0)
    np.random.seed(rng_seed)  # legacy global, in case any dependency reads it
    try:
        return args.func(args)
    except ConvsqlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
