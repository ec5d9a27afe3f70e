"""Training loop: AdamW, cosine annealing, early stopping on validation loss."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from .evaluation import ScoreSet, eer
from .model import ConfigError, MGAANet, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 5
    early_stop_patience: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_min: float = 1e-6
    val_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if not 1 <= self.early_stop_patience <= self.max_epochs:
            raise ConfigError("early_stop_patience must lie in [1, max_epochs]")
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError("need 0 <= lr_min <= lr and lr > 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        return self

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float) -> float:
    """Cosine annealing from lr_init at step 0 to lr_min at total_steps."""
    if total_steps <= 0:
        return lr_init
    step = min(max(step, 0), total_steps)
    if step == 0:
        return lr_init
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """Adam with decoupled weight decay, updating a ``{name: ndarray}`` dict in place."""

    def __init__(self, params: Dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Dict[str, Optional[np.ndarray]]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            p *= 1.0 - self.lr * self.weight_decay
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> Dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["step"] = np.array([self.step_count], dtype=np.float32)
        return out


class EarlyStopping:
    """Tracks the best validation loss; ``should_stop`` after ``patience`` misses."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; True when this epoch is a new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_eer: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    net: MGAANet
    history: List[EpochRecord]
    best_epoch: int
    optimizer: AdamW = field(repr=False, default=None)

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_eer,lr,seconds"]
        for r in self.history:
            lines.append(f"{r.epoch},{r.train_loss:.6f},{r.val_loss:.6f},{r.val_eer:.6f},{r.lr:.6g},{r.seconds:.2f}")
        return "\n".join(lines) + "\n"


def split_train_val(n: int, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled 80/20-style index split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n - n_val < 1:
        raise ConfigError(f"cannot split {n} samples into non-empty train and validation sets")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate_loss(net: MGAANet, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> Tuple[float, float]:
    """Eval-mode mean cross-entropy and EER (fake-probability scores)."""
    logits = net.predict_logits(x, batch_size).astype(np.float64)
    lsm = ag.log_softmax(logits, axis=1)
    loss = float(-lsm[np.arange(len(y)), y].mean())
    if len(np.unique(y)) < 2:
        return loss, float("nan")
    return loss, eer(ScoreSet(np.exp(lsm[:, 1]), y))[0]


def train(
    x: np.ndarray,
    y: np.ndarray,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    x_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
    init_seed: Optional[int] = None,
) -> TrainResult:
    """Train from scratch and return the best-validation-loss weights.

    Without an explicit validation set, ``val_fraction`` of ``x`` is held
    out by a seeded shuffle. Batches are reshuffled every epoch from the same
    seed, so a run is reproducible end to end.
    """
    train_cfg.validate()
    model_cfg.validate()
    y = np.asarray(y, dtype=np.int64)
    if x_val is None:
        tr, va = split_train_val(len(x), train_cfg.val_fraction, train_cfg.seed)
        x, x_val, y, y_val = x[tr], x[va], y[tr], y[va]
    y_val = np.asarray(y_val, dtype=np.int64)
    if len(x) == 0 or len(x_val) == 0:
        raise ConfigError("empty training or validation split")

    seed = train_cfg.seed if init_seed is None else init_seed
    net = MGAANet(model_cfg, seed=seed)
    opt = AdamW(net.params, train_cfg.lr, (train_cfg.beta1, train_cfg.beta2), train_cfg.eps, train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed + 1)
    steps_per_epoch = math.ceil(len(x) / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.max_epochs
    stopper = EarlyStopping(train_cfg.early_stop_patience)
    best = None
    history: List[EpochRecord] = []
    step = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.time()
        order = rng.permutation(len(x))
        losses, weights = [], []
        for start in range(0, len(x), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            opt.lr = cosine_lr(step, total_steps, train_cfg.lr, train_cfg.lr_min)
            p = net.tensors()
            logits = net.forward(x[idx], p, training=True, rng=rng)
            loss = ag.cross_entropy(logits, y[idx])
            loss.backward()
            opt.step({k: t.grad for k, t in p.items()})
            losses.append(float(loss.data))
            weights.append(len(idx))
            step += 1
        train_loss = float(np.average(losses, weights=weights))
        val_loss, val_eer = evaluate_loss(net, x_val, y_val, train_cfg.batch_size)
        rec = EpochRecord(epoch, train_loss, val_loss, val_eer, opt.lr, time.time() - t0)
        history.append(rec)
        log.info("epoch %d train %.4f val %.4f eer %.4f (%.1fs)", epoch, train_loss, val_loss, val_eer, rec.seconds)
        if stopper.update(epoch, val_loss):
            best = ({k: v.copy() for k, v in net.params.items()}, {k: v.copy() for k, v in net.buffers.items()})
        if stopper.should_stop:
            log.info("early stop after epoch %d (best %d)", epoch, stopper.best_epoch)
            break
    net.params.update(best[0])
    net.buffers.update(best[1])
    return TrainResult(net, history, stopper.best_epoch, opt)
