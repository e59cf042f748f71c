"""Instruction-tuning loop: dynamic rank sampling, accumulation, plateau LR, early stopping."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import GradAccumulator, RankSampler, apply_update, make_adam_states
from .errors import DivergedLoss, EmptySplit, NonFinite, RankOutOfRange
from .fusion import Example, FusionModel, collate, lm_loss, masked_accuracy
from .tensor import AdamState, Prng, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 32
    lr_patience: int = 5
    lr_factor: float = 0.5
    early_stop_patience: int = 10
    accum_steps: int = 1
    r_min: int = 4
    r_max: int = 16
    rank_weights: list | None = None
    rank_norm: bool = False
    per_layer_rank: bool = False
    eval_rank: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.accum_steps < 1:
            raise ValueError("epochs, batch_size and accum_steps must be >= 1")
        if self.early_stop_patience < self.lr_patience:
            raise ValueError("early_stop_patience must be >= lr_patience")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def sampler(self) -> RankSampler:
        return RankSampler(self.r_min, self.r_max, self.rank_weights)

    def to_dict(self):
        return asdict(self)


@dataclass
class Split:
    """Tokenized examples plus the vision states they index into."""

    examples: list
    vision: np.ndarray

    def __len__(self):
        return len(self.examples)

    def batch(self, idx):
        ex = [self.examples[i] for i in idx]
        inputs, targets, mask, slots = collate(ex)
        vis = self.vision[[e.image_index for e in ex]][:, None]
        return inputs, targets, mask, slots, vis


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement.

    After each reduction the next epoch sets a fresh reference, so a flat
    validation curve triggers reductions every ``patience + 1`` epochs.
    """

    def __init__(self, lr, patience=5, factor=0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = None
        self.bad_epochs = 0

    def step(self, val_loss) -> bool:
        if self.best is None or val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.best = None
            self.bad_epochs = 0
            return True
        return False


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False


def _snapshot(model: FusionModel):
    snap = {}
    for path, layer in model.adapters():
        for name in layer.trainable:
            snap[f"{path}.{name}"] = getattr(layer, name).copy()
    for path, owner, key in model.trainable_params():
        snap[path] = owner.params[key].copy()
    return snap


def _restore(model: FusionModel, snap) -> None:
    for path, layer in model.adapters():
        for name in layer.trainable:
            getattr(layer, name)[...] = snap[f"{path}.{name}"]
    for path, owner, key in model.trainable_params():
        owner.params[key][...] = snap[path]


def evaluate_loss(model: FusionModel, split: Split, b: int, batch_size: int = 64) -> float:
    """Token-weighted mean masked LM loss at a fixed adapter rank."""
    r_min = min(l.r_min for _, l in model.adapters())
    r_max = max(l.r_max for _, l in model.adapters())
    if not r_min <= b <= r_max:
        raise RankOutOfRange(f"evaluation rank {b} outside [{r_min}, {r_max}]")
    if len(split) == 0:
        raise EmptySplit("cannot evaluate an empty split")
    model.set_rank(b)
    model.set_training(False)
    total, count = 0.0, 0
    for start in range(0, len(split), batch_size):
        inputs, targets, mask, slots, vis = split.batch(range(start, min(start + batch_size, len(split))))
        logits = model.forward(inputs, slots, vis)
        loss, _ = lm_loss(logits, targets, mask)
        n = int(mask.sum())
        total += loss * n
        count += n
    return total / count


def evaluate_accuracy(model: FusionModel, split: Split, b: int, batch_size: int = 64) -> float:
    model.set_rank(b)
    model.set_training(False)
    hits, count = 0.0, 0
    for start in range(0, len(split), batch_size):
        inputs, targets, mask, slots, vis = split.batch(range(start, min(start + batch_size, len(split))))
        logits = model.forward(inputs, slots, vis)
        n = int(mask.sum())
        hits += masked_accuracy(logits, targets, mask) * n
        count += n
    return hits / count


class Optimizer:
    """Adam over every trainable tensor; adapters get rank-sliced updates."""

    def __init__(self, model: FusionModel, lr: float):
        self.model = model
        self.adapter_states = {path: make_adam_states(layer, lr) for path, layer in model.adapters()}
        self.param_states = {path: AdamState.like(owner.params[key], lr=lr)
                             for path, owner, key in model.trainable_params()}

    def set_lr(self, lr: float) -> None:
        for states in self.adapter_states.values():
            for st in states.values():
                st.lr = lr
        for st in self.param_states.values():
            st.lr = lr

    def collect(self) -> dict:
        grads = {}
        for path, layer in self.model.adapters():
            for name in layer.trainable:
                grads[f"{path}.{name}"] = layer.grads[name]
        for path, owner, key in self.model.trainable_params():
            grads[path] = owner.grads[key]
        return grads

    def step(self, grads: dict, ranks: dict, rank_norm: bool) -> None:
        for path, layer in self.model.adapters():
            sub = {name: grads[f"{path}.{name}"] for name in layer.trainable}
            apply_update(layer, sub, self.adapter_states[path], ranks[path], rank_norm)
        for path, owner, key in self.model.trainable_params():
            adam_step(self.param_states[path], owner.params[key], grads[path].astype(owner.params[key].dtype))


def train(model: FusionModel, train_split: Split, val_split: Split, cfg: TrainConfig,
          log_file=None, validate=None) -> TrainResult:
    """Fit adapters, gates, norms, embeddings and the vision projection.

    ``validate(model, epoch) -> float`` overrides the validation loss (used
    to script scheduler behaviour); ``log_file`` receives one JSON record per
    epoch.  The best-validation weights are restored before returning.
    """
    if len(train_split) == 0 or len(val_split) == 0:
        raise EmptySplit("train and validation splits must be non-empty")
    prng = Prng(cfg.seed)
    sampler = cfg.sampler()
    adapters = model.adapters()
    lo = max(layer.r_min for _, layer in adapters)
    hi = min(layer.r_max for _, layer in adapters)
    if not lo <= cfg.r_min <= cfg.r_max <= hi:
        raise RankOutOfRange(f"training ranks [{cfg.r_min}, {cfg.r_max}] exceed the adapters' [{lo}, {hi}]")
    eval_rank = cfg.eval_rank or cfg.r_max
    opt = Optimizer(model, cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.lr_patience, cfg.lr_factor)
    result = TrainResult()
    best_snap = _snapshot(model)
    since_best = 0
    step_size = cfg.batch_size * cfg.accum_steps

    for epoch in range(1, cfg.epochs + 1):
        order = prng.permutation(len(train_split))
        ranks_seen = Counter()
        losses = []
        for start in range(0, len(order), step_size):
            chunk = order[start:start + step_size]
            if cfg.per_layer_rank:
                drawn = [sampler.sample(prng) for _ in adapters]
            else:
                drawn = [sampler.sample(prng)] * len(adapters)
            ranks_seen.update(drawn[:1] if not cfg.per_layer_rank else drawn)
            model.set_rank(drawn)
            model.set_training(True, prng)
            acc = GradAccumulator()
            for m in range(0, len(chunk), cfg.batch_size):
                inputs, targets, mask, slots, vis = train_split.batch(chunk[m:m + cfg.batch_size])
                model.zero_grad()
                try:
                    logits = model.forward(inputs, slots, vis)
                    loss, dlogits = lm_loss(logits, targets, mask)
                except NonFinite as exc:
                    raise DivergedLoss(f"epoch {epoch}: {exc}") from exc
                if not np.isfinite(loss):
                    raise DivergedLoss(f"epoch {epoch}: loss is {loss}")
                model.backward(dlogits)
                acc.add(opt.collect())
                losses.append(loss)
            ranks = {path: r for (path, _), r in zip(adapters, drawn)}
            opt.step(acc.flush(), ranks, cfg.rank_norm)
        model.set_training(False)
        train_loss = float(np.mean(losses))
        val_loss = float(validate(model, epoch)) if validate else evaluate_loss(model, val_split, eval_rank)
        lr_used = sched.lr
        halved = sched.step(val_loss)
        if halved:
            log.info("epoch %d: validation stalled for %d epochs, lr -> %g", epoch, cfg.lr_patience, sched.lr)
            opt.set_lr(sched.lr)
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr_used,
                  "lr_halved": halved, "next_lr": sched.lr,
                  "rank_histogram": {str(k): v for k, v in sorted(ranks_seen.items())}}
        result.history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_snap = _snapshot(model)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                result.stopped_early = True
                log.info("early stop at epoch %d (best epoch %d)", epoch, result.best_epoch)
                break
    _restore(model, best_snap)
    model.set_training(False)
    return result
