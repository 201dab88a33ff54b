"""Cross-entropy + soft Dice training objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 1.0
    lambda_sdice: float = 1.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.lambda_ce < 0 or self.lambda_sdice < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _check_mask(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return y.astype(np.int64)


def one_hot(y: np.ndarray, k: int = 2, dtype=np.float32) -> np.ndarray:
    """K-channel one-hot of an integer mask, class axis inserted before H×W."""
    y = _check_mask(y)
    out = np.stack([(y == i) for i in range(k)], axis=-3)
    return out.astype(dtype)


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Mean over all pixels of -log softmax(logits)[y]; logits are (N×)2×S×S."""
    target = one_hot(y, logits.shape[-3], dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ValueError(f"mask shape {np.shape(y)} does not match logits {logits.shape}")
    logp = T.log_softmax(logits, axis=-3)
    n_pix = target.size // logits.shape[-3]
    return T.tsum(logp * Tensor(target, dtype=logits.dtype)) * (-1.0 / n_pix)


def soft_dice(p: Tensor, y_onehot, epsilon: float = 1e-7) -> Tensor:
    """1 - mean over classes of 2Σyp / (Σy + Σp + ε).

    ``p`` holds class probabilities ``K×S×S`` (or batched); the batched loss
    is the mean of the per-sample losses.
    """
    y = np.asarray(y_onehot, dtype=p.dtype)
    if y.shape != p.shape:
        raise ValueError(f"target shape {y.shape} does not match probabilities {p.shape}")
    if np.abs(p.data.sum(axis=-3) - 1.0).max() > 1e-4:
        raise ValueError("probabilities must sum to 1 over the class axis")
    yt = Tensor(y, dtype=p.dtype)
    inter = T.tsum(p * yt, axis=(-2, -1))
    denom = T.tsum(p, axis=(-2, -1)) + Tensor(y.sum(axis=(-2, -1)) + epsilon, dtype=p.dtype)
    ratio = T.div(inter * 2.0, denom)
    return 1.0 - T.mean(ratio)


def total_loss(logits: Tensor, y, w: LossWeights = LossWeights()) -> Tensor:
    probs = T.softmax(logits, axis=-3)
    loss = None
    if w.lambda_ce:
        loss = cross_entropy(logits, y) * w.lambda_ce
    if w.lambda_sdice:
        sd = soft_dice(probs, one_hot(y, logits.shape[-3], logits.dtype), w.epsilon) * w.lambda_sdice
        loss = sd if loss is None else loss + sd
    if loss is None:
        loss = T.tsum(logits) * 0.0
    return loss
