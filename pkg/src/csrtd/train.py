"""Adam training loop with patience-based early stopping on validation loss."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .config import DESK, ModelConfig
from .data import SplitData
from .decoder import binarize
from .losses import LossWeights, total_loss
from .metrics import EvalReport, evaluate_masks
from .model import RTDModel, images_to_tensor
from .nn import Param

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    loss: LossWeights = field(default_factory=LossWeights)
    patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    model: ModelConfig = DESK

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[Param], state: AdamState, lr: float, betas=(0.5, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``param.data``."""
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise ValueError(f"missing gradients for {missing[:5]}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[p.name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[p.name], state.v[p.name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Sequence[Param], lr: float = 1e-3, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def moments(self) -> Dict[str, np.ndarray]:
        out = {f"m.{k}": v.copy() for k, v in self.state.m.items()}
        out.update({f"v.{k}": v.copy() for k, v in self.state.v.items()})
        return out

    def load_moments(self, moments: Dict[str, np.ndarray], step: int) -> None:
        self.state = AdamState(
            {k[2:]: v.copy() for k, v in moments.items() if k.startswith("m.")},
            {k[2:]: v.copy() for k, v in moments.items() if k.startswith("v.")},
            step,
        )


# ----------------------------------------------------------------------
# early stopping
# ----------------------------------------------------------------------
class EarlyStopping:
    """Tracks the best validation loss; stops after ``patience`` epochs without improvement."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ----------------------------------------------------------------------
# evaluation helpers
# ----------------------------------------------------------------------
def _batches(n: int, size: int, order: Optional[np.ndarray] = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start : start + size]


def evaluate(model: RTDModel, data: SplitData, batch_size: int = 8, weights: LossWeights = LossWeights()):
    """Mean loss and an :class:`EvalReport` over ``data`` (no tape recorded)."""
    losses, preds = [], []
    with T.no_grad():
        for b in _batches(len(data), batch_size):
            logits = model(images_to_tensor(data.goals[b]), images_to_tensor(data.currents[b]))
            losses.append(total_loss(logits, data.masks[b], weights).item() * len(b))
            preds.extend(binarize(logits))
    return sum(losses) / len(data), evaluate_masks(preds, list(data.masks))


def predict(model: RTDModel, goals: np.ndarray, currents: np.ndarray, batch_size: int = 8) -> List[np.ndarray]:
    out = []
    for b in _batches(len(goals), batch_size):
        out.extend(model.predict(goals[b], currents[b]))
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float
    val_f1: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} train_loss={self.train_loss:.6f} val_loss={self.val_loss:.6f} "
            f"val_miou={self.val_miou:.6f} val_f1={self.val_f1:.6f}"
        )


@dataclass
class TrainResult:
    best: Checkpoint
    log: List[EpochRecord]
    initial_train_loss: float
    stopped_early: bool

    @property
    def final_train_loss(self) -> float:
        return self.log[-1].train_loss


Validator = Callable[[RTDModel, int], Tuple[float, Optional[EvalReport]]]


def train(
    config: TrainConfig,
    train_data: SplitData,
    val_data: Optional[SplitData],
    log_path=None,
    ckpt_path=None,
    validate: Optional[Validator] = None,
    progress: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Train from scratch; returns the checkpoint with the lowest validation loss.

    ``validate(model, epoch) -> (val_loss, report)`` replaces the default
    validation pass when given.
    """
    if len(train_data) == 0:
        raise ValueError("training split is empty")
    if validate is None:
        if val_data is None or len(val_data) == 0:
            raise ValueError("validation split is empty")

        def validate(m, epoch):
            return evaluate(m, val_data, config.batch_size, config.loss)

    model = RTDModel(config.model, seed=config.seed)
    params = model.parameters()
    opt = Adam(params, config.lr, config.betas, config.eps)
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.patience)
    initial, _ = evaluate(model, train_data, config.batch_size, config.loss)

    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        Path(log_path).write_text("")
    history: List[EpochRecord] = []
    best: Optional[Checkpoint] = None
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_data))
        total = 0.0
        for b in _batches(len(train_data), config.batch_size, order):
            logits = model(images_to_tensor(train_data.goals[b]), images_to_tensor(train_data.currents[b]))
            loss = total_loss(logits, train_data.masks[b], config.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {opt.state.t + 1}")
            opt.zero_grad()
            T.backward(loss, params)
            opt.step()
            total += value * len(b)
        val_loss, report = validate(model, epoch)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss {val_loss} at epoch {epoch}")
        rec = EpochRecord(
            epoch,
            total / len(train_data),
            float(val_loss),
            report.miou if report is not None else float("nan"),
            report.f1 if report is not None else float("nan"),
        )
        history.append(rec)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(rec.line() + "\n")
        if progress is not None:
            progress(rec)
        if stopper.update(epoch, rec.val_loss):
            best = Checkpoint(config.model, model.state_dict(), opt.moments(), epoch, rec.val_loss, opt.state.t)
            if ckpt_path is not None:
                save_checkpoint(best, ckpt_path)
        if stopper.should_stop:
            log.info("early stop after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    return TrainResult(best, history, initial, stopper.should_stop)


def model_from_checkpoint(ckpt: Checkpoint) -> RTDModel:
    model = RTDModel(ckpt.config, seed=0)
    model.load_state_dict(ckpt.params)
    return model
