"""Minibatch Adam training over the dual-input objective."""

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore, backward
from .data import Interaction, Schema
from .errors import ConfigError
from .losses import build_examples, total_loss
from .model import Model

logger = logging.getLogger("convsql")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 8
    epochs: int = 50
    lambda1: float = 0.1
    lambda2: float = 3.0
    seed: int = 0
    eval_every: int = 1
    eval_beam: int = 1
    stop_qm: float | None = None
    stop_kl: float | None = None
    use_bow: bool = True
    use_sg_kl: bool = True
    use_sp_kl: bool = True
    train_dropout: bool = True
    metrics_path: str | None = None

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("learning rate must be >= 0 and batch size/epochs positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda weights must be >= 0")


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, scale: float = 1.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, tensor in store.trainable():
            if tensor.grad is None:
                continue
            g = tensor.grad * scale
            m = self.m.setdefault(name, np.zeros_like(tensor.data))
            v = self.v.setdefault(name, np.zeros_like(tensor.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            tensor.data = tensor.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class EpochMetrics:
    epoch: int
    sp: float
    sg_bow: float
    sp_kl: float
    sg_kl: float
    total: float
    dev_qm: float | None = None
    dev_im: float | None = None
    seconds: float = 0.0

    def as_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "sp": self.sp,
                "sg_bow": self.sg_bow,
                "sp_kl": self.sp_kl,
                "sg_kl": self.sg_kl,
                "total": self.total,
                "dev_qm": self.dev_qm,
                "dev_im": self.dev_im,
            }
        )


def train(
    model: Model,
    interactions: list[Interaction],
    schemas: dict[str, Schema],
    cfg: TrainConfig,
    dev_interactions: list[Interaction] | None = None,
) -> list[EpochMetrics]:
    """Optimize the model in place; returns per-epoch metrics.

    Deterministic given cfg.seed: shuffling, dropout and evaluation all
    derive from it. dev metrics default to the training set when no dev
    split is given.
    """
    from .evaluation import evaluate  # deferred to avoid a module cycle

    examples = build_examples(interactions, schemas, model)
    dev = dev_interactions if dev_interactions is not None else interactions
    shuffle_rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng(cfg.seed + 1)
    adam = Adam(lr=cfg.lr)
    metrics: list[EpochMetrics] = []
    log_file = open(cfg.metrics_path, "w", encoding="utf-8") if cfg.metrics_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.time()
            order = shuffle_rng.permutation(len(examples))
            sums = {"sp": 0.0, "sg_bow": 0.0, "sp_kl": 0.0, "sg_kl": 0.0, "total": 0.0}
            for start in range(0, len(order), cfg.batch_size):
                batch = [examples[i] for i in order[start : start + cfg.batch_size]]
                model.params.zero_grad()
                for ex in batch:
                    enc_ctx = model.encode(ex.prep_ctx, dropout_rng, cfg.train_dropout)
                    enc_self = (
                        model.encode(ex.prep_self, dropout_rng, cfg.train_dropout)
                        if ex.prep_self is not None
                        else None
                    )
                    breakdown = total_loss(
                        ex,
                        enc_ctx,
                        enc_self,
                        model,
                        cfg.lambda1,
                        cfg.lambda2,
                        dropout_rng,
                        cfg.train_dropout,
                        use_bow=cfg.use_bow,
                        use_sg_kl=cfg.use_sg_kl,
                        use_sp_kl=cfg.use_sp_kl,
                    )
                    if not np.isfinite(breakdown.total):
                        raise FloatingPointError(
                            f"non-finite loss {breakdown.total} at interaction "
                            f"{ex.interaction_index} turn {ex.turn_index} (epoch {epoch})"
                        )
                    backward(breakdown.total_tensor)
                    for key in sums:
                        sums[key] += getattr(breakdown, key)
                adam.step(model.params, scale=1.0 / len(batch))
            n = len(examples)
            em = EpochMetrics(
                epoch=epoch,
                sp=sums["sp"] / n,
                sg_bow=sums["sg_bow"] / n,
                sp_kl=sums["sp_kl"] / n,
                sg_kl=sums["sg_kl"] / n,
                total=sums["total"] / n,
                seconds=time.time() - t0,
            )
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                report = evaluate(model, dev, schemas, beam=cfg.eval_beam, seed=cfg.seed)
                em.dev_qm = report.qm
                em.dev_im = report.im
            metrics.append(em)
            if log_file:
                log_file.write(em.as_json() + "\n")
                log_file.flush()
            logger.info(
                "epoch %d: total %.4f sp %.4f bow %.4f sp_kl %.5f sg_kl %.5f qm %s (%.1fs)",
                epoch, em.total, em.sp, em.sg_bow, em.sp_kl, em.sg_kl, em.dev_qm, em.seconds,
            )
            if (
                cfg.stop_qm is not None
                and em.dev_qm is not None
                and em.dev_qm >= cfg.stop_qm
                and (cfg.stop_kl is None or em.sp_kl + em.sg_kl <= cfg.stop_kl)
            ):
                break
    finally:
        if log_file:
            log_file.close()
    return metrics
