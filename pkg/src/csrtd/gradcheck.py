"""Central finite-difference checks of every differentiable primitive and of
the full model, run in float64."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import TINY, ModelConfig
from .decoder import correlate
from .losses import LossWeights, cross_entropy, one_hot, soft_dice, total_loss
from .model import RTDModel
from .tensor import Tensor

STEP = 1e-4
PRIMITIVE_TOL = 1e-3
MODEL_TOL = 1e-2


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """‖a − b‖ / max(‖a‖, ‖b‖), 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / denom) if denom > 1e-12 else 0.0


def numeric_gradient(f: Callable[[List[np.ndarray]], float], arrays: List[np.ndarray], which: int, step: float = STEP):
    x = arrays[which]
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(arrays)
        flat[i] = orig - step
        down = f(arrays)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def check_op(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], rng: np.random.Generator, diff: Sequence[int] = None) -> float:
    """Max relative error between analytic and numeric gradients of ``sum(fn(*x) * R)``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    diff = range(len(arrays)) if diff is None else diff
    with T.check_mode():
        probe = fn(*[Tensor(a) for a in arrays])
        weight = rng.standard_normal(probe.shape)

        def scalar(arrs):
            with T.no_grad():
                return float((fn(*[Tensor(a) for a in arrs]).data * weight).sum())

        leaves = [Tensor(a, requires_grad=i in diff) for i, a in enumerate(arrays)]
        out = fn(*leaves)
        T.backward(T.tsum(out * Tensor(weight)))
        worst = 0.0
        for i in diff:
            num = numeric_gradient(scalar, arrays, i)
            worst = max(worst, rel_error(leaves[i].grad, num))
    return worst


def _softmax_probs(logits: Tensor) -> Tensor:
    return T.softmax(logits, axis=0)


def primitive_cases() -> Dict[str, Callable[[np.random.Generator], Tuple[Callable, list, Sequence[int]]]]:
    """Each case maps an RNG to (fn, input arrays, indices to differentiate)."""
    n = lambda rng, *s: rng.standard_normal(s)
    return {
        "matmul": lambda r: (T.matmul, [n(r, 5, 4), n(r, 4, 3)], None),
        "matmul_batched": lambda r: (T.matmul, [n(r, 2, 3, 4), n(r, 4, 2)], None),
        "softmax": lambda r: (lambda x: T.softmax(x, axis=1), [n(r, 3, 4)], None),
        "log_softmax": lambda r: (lambda x: T.log_softmax(x, axis=0), [n(r, 3, 4)], None),
        "conv2d": lambda r: (lambda x, k: T.conv2d(x, k), [n(r, 2, 5, 5), n(r, 3, 2, 3, 3)], None),
        "conv2d_strided": lambda r: (
            lambda x, k, b: T.conv2d(x, k, b, stride=2, padding=1), [n(r, 2, 6, 6), n(r, 3, 2, 3, 3), n(r, 3)], None),
        "conv2d_1x1": lambda r: (lambda x, k, b: T.conv2d(x, k, b), [n(r, 3, 4, 4), n(r, 2, 3, 1, 1), n(r, 2)], None),
        "depthwise_conv2d": lambda r: (T.depthwise_conv2d, [n(r, 4, 6, 6), n(r, 4, 3, 3)], None),
        "upsample2x": lambda r: (T.upsample2x, [n(r, 2, 3, 3)], None),
        "avgpool2x": lambda r: (T.avgpool2x, [n(r, 2, 4, 4)], None),
        "concat": lambda r: (lambda a, b: T.concat([a, b], axis=0), [n(r, 2, 3, 3), n(r, 1, 3, 3)], None),
        "reshape_transpose": lambda r: (
            lambda x: T.transpose(T.reshape(x, (3, 2, 4)), (2, 0, 1)), [n(r, 6, 4)], None),
        "getitem": lambda r: (lambda x: x[:, 1:], [n(r, 3, 4)], None),
        "broadcast_to": lambda r: (lambda x: T.broadcast_to(x, (3, 2, 4)), [n(r, 1, 2, 4)], None),
        "add": lambda r: (lambda a, b: a + b, [n(r, 3, 4), n(r, 4)], None),
        "mul": lambda r: (lambda a, b: a * b, [n(r, 3, 4), n(r, 3, 1)], None),
        "div": lambda r: (T.div, [n(r, 3, 4), r.uniform(0.5, 2.0, (3, 4))], None),
        "exp": lambda r: (T.exp, [n(r, 3, 4)], None),
        "log": lambda r: (T.log, [r.uniform(0.5, 2.0, (3, 4))], None),
        "sum_mean": lambda r: (lambda x: T.tsum(x, axis=1) + T.mean(x, axis=1), [n(r, 3, 4)], None),
        "layernorm": lambda r: (T.layernorm, [n(r, 3, 5), 1 + 0.1 * n(r, 5), n(r, 5)], None),
        "gelu": lambda r: (T.gelu, [n(r, 3, 4)], None),
        "correlate": lambda r: (lambda z: correlate(z, 1), [n(r, 4, 5, 5)], None),
        "cross_entropy": lambda r: (
            (lambda y: (lambda x: cross_entropy(x, y)))(r.integers(0, 2, (3, 3))), [n(r, 2, 3, 3)], None),
        "soft_dice": lambda r: (
            (lambda y: (lambda x: soft_dice(_softmax_probs(x), one_hot(y, dtype=np.float64))))(r.integers(0, 2, (4, 4))),
            [n(r, 2, 4, 4)], None),
    }


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    runs: int

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:<20} worst_rel_err={self.worst:.2e} tol={self.tol:.0e} runs={self.runs}"


def check_primitive(name: str, seeds: Sequence[int]) -> CheckResult:
    case = primitive_cases()[name]
    worst = 0.0
    for s in seeds:
        rng = np.random.default_rng(s)
        fn, arrays, diff = case(rng)
        worst = max(worst, check_op(fn, arrays, rng, diff))
    return CheckResult(name, worst, PRIMITIVE_TOL, len(seeds))


def model_spot_check(seed: int, cfg: ModelConfig = TINY, coords: int = 20) -> CheckResult:
    """Compare analytic and numeric gradients at ``coords`` random entries of every Param."""
    rng = np.random.default_rng(seed)
    model = RTDModel(cfg, seed=seed).astype(np.float64)
    s = cfg.image_size
    goal = rng.uniform(-0.5, 0.5, (1, 3, s, s))
    cur = rng.uniform(-0.5, 0.5, (1, 3, s, s))
    mask = (rng.random((1, s, s)) < 0.3).astype(np.int64)
    weights = LossWeights()
    with T.check_mode():
        def loss_value() -> float:
            with T.no_grad():
                return total_loss(model(Tensor(goal), Tensor(cur)), mask, weights).item()

        params = model.parameters()
        model.zero_grad()
        T.backward(total_loss(model(Tensor(goal), Tensor(cur)), mask, weights), params)
        worst = 0.0
        for p in params:
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + STEP
                up = loss_value()
                flat[i] = orig - STEP
                down = loss_value()
                flat[i] = orig
                num = (up - down) / (2 * STEP)
                ana = p.grad.reshape(-1)[i]
                denom = max(abs(num), abs(ana), 1e-7)
                worst = max(worst, abs(num - ana) / denom)
    return CheckResult(f"model[seed={seed}]", worst, MODEL_TOL, len(params))


def run_suite(seed: int = 0, n_seeds: int = 50, log: Callable[[str], None] = print) -> bool:
    ok = True
    seeds = [seed * 1000 + k for k in range(n_seeds)]
    for name in primitive_cases():
        res = check_primitive(name, seeds)
        log(res.line())
        ok &= res.passed
    res = model_spot_check(seed)
    log(res.line())
    return ok and res.passed
