"""Pairwise ranking training: BPR loss, Adam with staircase decay, batch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numcore as nc
from .instances import TrainingInstance
from .model import ModelParams, make_batch, score_batch
from .numcore import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, last_good: ModelParams | None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    negatives: int = 500
    lr0: float = 0.001
    decay: float = 0.96
    decay_steps: int = 1000
    l2: float = 1e-5
    max_iters: int = 1000
    seed: int = 0
    pairs_per_instance: int | None = None
    resample_each_epoch: bool = False
    checkpoint_every: int = 0
    popularity_exponent: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.negatives < 1 or self.decay_steps < 1:
            raise ValueError("batch_size, negatives and decay_steps must be positive")
        if self.lr0 <= 0 or not 0 < self.decay <= 1:
            raise ValueError("lr0 must be positive and decay in (0, 1]")
        if self.l2 < 0 or self.max_iters < 0:
            raise ValueError("l2 and max_iters must be non-negative")


def bpr_pair_loss(o_pos: float, o_neg: float) -> float:
    """ln(1 + exp(-(o_pos - o_neg))), evaluated as a softplus."""
    m = o_pos - o_neg
    return max(-m, 0.0) + math.log1p(math.exp(-abs(m)))


def bpr_loss(scores: Tensor, pair_mask: np.ndarray | None = None) -> Tensor:
    """Summed pair loss for scores (B, 1 + n) with the positive in column 0."""
    B, C = scores.shape
    pos = nc.gather(nc.reshape(scores, (B * C,)), np.repeat(np.arange(B) * C, C - 1))
    neg_idx = (np.arange(B)[:, None] * C + np.arange(1, C)[None, :]).reshape(-1)
    neg = nc.gather(nc.reshape(scores, (B * C,)), neg_idx)
    per_pair = nc.softplus(nc.sub(neg, pos))
    if pair_mask is not None:
        per_pair = nc.scale(per_pair, pair_mask.reshape(-1).astype(np.float64))
    return nc.total(per_pair)


def l2_penalty(params: ModelParams, lam: float) -> Tensor:
    terms = [nc.total(nc.mul(t, t)) for t in params.trainable().values()]
    return nc.scale(nc.add_n(terms), lam / 2.0)


# ------------------------------------------------------------------- adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def learning_rate(step: int, lr0: float, decay: float, decay_steps: int) -> float:
    """Staircase exponential decay: lr0 * decay ** floor(step / decay_steps)."""
    return lr0 * decay ** (step // decay_steps)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name} at step {state.step}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    params: ModelParams
    history: list[tuple[int, float, float, float]]  # (step, lr, batch loss, mean pair loss)

    def loss_csv(self) -> str:
        rows = ["step,lr,loss,mean_pair_loss"]
        rows += [f"{s},{lr!r},{loss!r},{m!r}" for s, lr, loss, m in self.history]
        return "\n".join(rows) + "\n"


def _candidates(batch_insts, cfg: TrainConfig, rng, resample: Callable | None):
    negs = [resample(i) if resample else i.negatives for i in batch_insts]
    if cfg.pairs_per_instance is not None:
        negs = [
            n if len(n) <= cfg.pairs_per_instance else np.sort(rng.choice(n, cfg.pairs_per_instance, replace=False))
            for n in negs
        ]
    width = max(len(n) for n in negs)
    if width == 0:
        raise ValueError("instances carry no negatives")
    cands = np.zeros((len(batch_insts), 1 + width), dtype=np.int64)
    mask = np.zeros((len(batch_insts), width), dtype=bool)
    for r, (inst, n) in enumerate(zip(batch_insts, negs)):
        cands[r, 0] = inst.positive
        cands[r, 1 : 1 + len(n)] = n
        cands[r, 1 + len(n) :] = inst.positive
        mask[r, : len(n)] = True
    return cands, mask


def train(
    instances: list[TrainingInstance],
    params: ModelParams,
    cfg: TrainConfig,
    on_checkpoint: Callable[[int, ModelParams], None] | None = None,
    resample: Callable[[TrainingInstance], np.ndarray] | None = None,
    time_budget: float | None = None,
) -> TrainResult:
    """Minimise summed BPR pair loss + (l2 / 2) * ||theta||^2 with Adam.

    Batches are drawn without replacement within an epoch and reshuffled
    every epoch. ``params`` is updated in place and also returned.
    """
    if not instances:
        raise ValueError("no training instances")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = []
    last_good = params.copy() if cfg.checkpoint_every else None
    order = np.zeros(0, dtype=np.int64)
    cursor = 0
    epoch = 0
    started = time.perf_counter()
    for step in range(cfg.max_iters):
        if cursor >= len(order):
            order = rng.permutation(len(instances))
            cursor = 0
            epoch += 1
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        batch_insts = [instances[i] for i in idx]
        use_resample = resample if (cfg.resample_each_epoch and epoch > 1) else None
        cands, pair_mask = _candidates(batch_insts, cfg, rng, use_resample)

        params.zero_grad()
        try:
            with nc.Tape() as tape:
                scores = score_batch(params, make_batch(batch_insts, params.cfg), cands)
                pair_loss = bpr_loss(scores, pair_mask)
                loss = nc.add(pair_loss, l2_penalty(params, cfg.l2)) if cfg.l2 else pair_loss
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"loss became {value}")
            tape.backward(loss)
        except FloatingPointError as e:
            raise TrainingDiverged(f"{e} at step {step}", last_good) from e
        lr = learning_rate(step, cfg.lr0, cfg.decay, cfg.decay_steps)
        trainable = params.trainable()
        grads = {k: t.grad for k, t in trainable.items() if t.grad is not None}
        try:
            adam_step({k: trainable[k].data for k in grads}, grads, state, lr)
        except FloatingPointError as e:
            raise TrainingDiverged(str(e), last_good) from e
        history.append((step, lr, value, float(pair_loss.data) / max(1, int(pair_mask.sum()))))
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            last_good = params.copy()
            if on_checkpoint:
                on_checkpoint(step + 1, last_good)
        if time_budget is not None and time.perf_counter() - started > time_budget:
            log.warning("time budget reached after %d steps", step + 1)
            break
    return TrainResult(params, history)
