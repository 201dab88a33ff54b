"""Precision / recall / F1 / mIoU over binary change masks, the evaluation
report format, and the pixel-difference baseline."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

REPORT_KEYS = ("precision", "recall", "f1", "miou", "n_samples")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool and not np.isin(m, (0, 1)).all():
        raise ValueError("masks must be binary (0/1)")
    return m.astype(bool)


def confusion(pred, y) -> ConfusionCounts:
    p, t = _binary(pred), _binary(y)
    if p.shape != t.shape:
        raise ValueError(f"mask shape mismatch: prediction {p.shape} vs ground truth {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def precision(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    # harmonic mean; 0 when either term is 0
    return 2.0 / (1.0 / p + 1.0 / r) if p > 0 and r > 0 else 0.0


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom else 1.0


def miou(ious: Iterable[float]) -> float:
    vals = list(ious)
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class EvalReport:
    counts: ConfusionCounts
    per_sample: List[ConfusionCounts] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return len(self.per_sample)

    @property
    def precision(self) -> float:
        return precision(self.counts)

    @property
    def recall(self) -> float:
        return recall(self.counts)

    @property
    def f1(self) -> float:
        return f1(self.counts)

    @property
    def miou(self) -> float:
        return miou(iou(c) for c in self.per_sample)

    @property
    def f1_per_sample(self) -> float:
        return float(np.mean([f1(c) for c in self.per_sample])) if self.per_sample else 0.0

    def as_dict(self) -> Dict[str, float]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "miou": self.miou,
            "n_samples": self.n_samples,
        }

    def render(self, title: str = "evaluation") -> str:
        c = self.counts
        lines = [
            f"# {title}",
            f"samples: {self.n_samples}",
            f"confusion: tp={c.tp} fp={c.fp} fn={c.fn} tn={c.tn}",
            f"precision {self.precision:.4f}  recall {self.recall:.4f}  f1 {self.f1:.4f}",
            f"miou {self.miou:.4f}  (per-sample mean f1 {self.f1_per_sample:.4f})",
            "[metrics]",
        ]
        for key, val in self.as_dict().items():
            lines.append(f"{key}={val}" if key == "n_samples" else f"{key}={val:.6f}")
        lines.append("[/metrics]")
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> Dict[str, float]:
    """Read the key=value block back out of :meth:`EvalReport.render` output."""
    out, inside = {}, False
    for line in text.splitlines():
        if line == "[metrics]":
            inside = True
        elif line == "[/metrics]":
            inside = False
        elif inside and "=" in line:
            k, v = line.split("=", 1)
            out[k] = int(v) if k == "n_samples" else float(v)
    return out


def evaluate_masks(preds: Sequence, truths: Sequence) -> EvalReport:
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} ground-truth masks")
    per = [confusion(p, t) for p, t in zip(preds, truths)]
    total = ConfusionCounts()
    for c in per:
        total = total + c
    return EvalReport(total, per)


# ----------------------------------------------------------------------
# pixel-difference baseline
# ----------------------------------------------------------------------
def pixel_distance(goal: np.ndarray, cur: np.ndarray) -> np.ndarray:
    g, c = np.asarray(goal), np.asarray(cur)
    if g.shape != c.shape:
        raise ValueError(f"image size mismatch: {g.shape} vs {c.shape}")
    diff = g.astype(np.float64) - c.astype(np.float64)
    return np.sqrt((diff * diff).sum(axis=-1))


def pixel_difference_baseline(goal: np.ndarray, cur: np.ndarray, theta: float) -> np.ndarray:
    """1 where the Euclidean RGB distance exceeds ``theta``."""
    return (pixel_distance(goal, cur) > theta).astype(np.uint8)


def tune_threshold(goals, curs, masks, thetas: Optional[Sequence[float]] = None) -> float:
    """Pick the threshold maximising corpus F1 over the given samples."""
    dist = pixel_distance(goals, curs)
    truth = np.asarray(masks).astype(bool)
    if thetas is None:
        thetas = np.arange(0.0, 442.0, 2.0)
    best_theta, best_f1 = float(thetas[0]), -1.0
    for theta in thetas:
        pred = dist > theta
        tp = np.count_nonzero(pred & truth)
        c = ConfusionCounts(tp, int(np.count_nonzero(pred)) - tp, int(np.count_nonzero(truth)) - tp, 0)
        score = f1(c)
        if score > best_f1:
            best_theta, best_f1 = float(theta), score
    return best_theta
