"""Adam training loop: multi-speaker pre-training and decoder-only adaptation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..conditioning import EmbeddingTable, FeatureMask
from ..errors import DivergedLoss, EmptyList
from .corpus import rng_stream
from .model import (DECODER_PARAMS, N_MELS, SpeakerMode, ToyModelParams, TrainItem,
                    batch_loss, grad, init_params, make_batch)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    pretrain_steps: int = 700
    decay_step: int = 500
    pretrain_lr: float = 1e-3
    decayed_lr: float = 1e-5
    adapt_steps: int = 600
    adapt_lr: float = 1e-5
    pretrain_batch: int = 40
    adapt_batch: int = 20
    d_e: int = 16
    hidden: int = 64
    embedding_init_scale: float = 0.001
    seed: int = 0

    def validate(self) -> None:
        if self.pretrain_steps < 1 or self.adapt_steps < 0:
            raise ValueError("pretrain_steps must be >= 1 and adapt_steps >= 0")
        if min(self.pretrain_lr, self.decayed_lr, self.adapt_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.pretrain_batch < 1 or self.adapt_batch < 1:
            raise ValueError("batch sizes must be >= 1")

    @classmethod
    def scaled(cls, factor: float = 100.0, **overrides) -> "TrainConfig":
        """Shrink the 70k-step / 50k-decay pre-training schedule by ``factor``."""
        base = dict(pretrain_steps=max(1, round(70000 / factor)),
                    decay_step=max(1, round(50000 / factor)))
        base.update(overrides)
        return cls(**base)

    def lr_at(self, step: int) -> float:
        return self.pretrain_lr if step < self.decay_step else self.decayed_lr


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-6):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        """Update ``params`` in place for every key present in ``grads``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    params: ToyModelParams
    table: EmbeddingTable | None
    trace: list = field(default_factory=list)   # (step, loss, lr)


def _check(value: float, step: int, stage: str) -> None:
    if not math.isfinite(value):
        raise DivergedLoss(f"non-finite loss at {stage} step {step}", tag=stage)


def _sample(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


def pretrain(items: list[TrainItem], mode: SpeakerMode, mask: FeatureMask, cfg: TrainConfig,
             vocab_size: int, d_s: int) -> TrainResult:
    """Jointly train token embeddings, decoder and (embedded mode) the speaker table."""
    cfg.validate()
    if len({it.speaker_id for it in items}) < 2:
        raise EmptyList("pre-training needs at least two speakers")
    init_rng = rng_stream(cfg.seed, "init")
    bias = (np.sum([it.seg_means.T @ it.durations for it in items], axis=0)
            / sum(it.n_frames for it in items))
    params = init_params(vocab_size, cfg.d_e, d_s, cfg.hidden, mask, mode, init_rng, bias)
    table = None
    if mode is SpeakerMode.EMBEDDED:
        table = EmbeddingTable.random({it.speaker_id for it in items}, d_s,
                                      rng_stream(cfg.seed, "embedding"), cfg.embedding_init_scale)

    batch_rng = rng_stream(cfg.seed, "pretrain-batches")
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    store = params.arrays()
    trace = []
    for step in range(cfg.pretrain_steps):
        batch = make_batch([items[i] for i in _sample(batch_rng, len(items), cfg.pretrain_batch)])
        value, grads, spk_grads = grad(params, batch, table)
        _check(value, step, "pretrain")
        lr = cfg.lr_at(step)
        trace.append((step, value, lr))
        if table is not None:
            for sid, g in spk_grads.items():
                store[f"spk:{sid}"] = table[sid]
                grads[f"spk:{sid}"] = g
        opt.step(store, grads, lr)
    log.debug("pretrain %s/%s final loss %.5f", mode.value, mask.label(), trace[-1][1])
    return TrainResult(params, table, trace)


def adapt(result: TrainResult, items: list[TrainItem], speaker_id: str, cfg: TrainConfig,
          mode: SpeakerMode | None = None) -> TrainResult:
    """Fine-tune only the decoder (plus a fresh embedding in embedded mode).

    The pretrained result is left untouched; token embeddings and existing
    table entries are carried over unchanged.
    """
    cfg.validate()
    params = result.params.copy()
    mode = params.mode if mode is None else mode
    table = None
    if mode is SpeakerMode.EMBEDDED:
        table = result.table.copy()
        if speaker_id not in table:
            table[speaker_id] = result.table.mean()
    if not items:
        raise EmptyList(f"no adaptation data for {speaker_id}")

    batch_rng = rng_stream(cfg.seed, f"adapt-batches/{speaker_id}")
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    store = params.arrays()
    if table is not None:
        store[f"spk:{speaker_id}"] = table[speaker_id]
    trace = []
    for step in range(cfg.adapt_steps):
        batch = make_batch([items[i] for i in _sample(batch_rng, len(items), cfg.adapt_batch)])
        value, grads, spk_grads = grad(params, batch, table)
        _check(value, step, "adapt")
        trace.append((step, value, cfg.adapt_lr))
        update = {k: grads[k] for k in DECODER_PARAMS}
        if table is not None:
            update[f"spk:{speaker_id}"] = spk_grads[speaker_id]
        opt.step(store, update, cfg.adapt_lr)
    return TrainResult(params, table, trace)


def evaluate_loss(result: TrainResult, items: list[TrainItem]) -> float:
    """Frame-weighted MSE of ``items`` under ``result`` (one big batch)."""
    return batch_loss(result.params, make_batch(items), result.table)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, value, lr in trace:
            w.writerow([step, repr(float(value)), repr(float(lr))])


__all__ = ["Adam", "TrainConfig", "TrainResult", "pretrain", "adapt", "evaluate_loss",
           "write_trace_csv", "N_MELS"]
