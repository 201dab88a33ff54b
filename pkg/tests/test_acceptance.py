"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are echoed as they happen (visible with ``-s``) and repeated in the
terminal summary under "acceptance criteria".
"""
import time

import numpy as np
from threadpoolctl import threadpool_limits

import oracles
from conftest import ACCEPTANCE_LINES, DESK_EPOCHS
from csrtd import tensor as T
from csrtd.attention import AttnWeights, TokenSeq, conv_attn, cross_attn, factor_attn
from csrtd.checkpoint import load_checkpoint, save_checkpoint
from csrtd.config import PAPER, TINY
from csrtd.data import SplitSpec, build_dataset, samples_in_memory
from csrtd.decoder import correlate
from csrtd.gradcheck import check_primitive, model_spot_check, primitive_cases
from csrtd.losses import one_hot, soft_dice
from csrtd.metrics import confusion, evaluate_masks, f1, iou, pixel_difference_baseline, precision, recall, tune_threshold
from csrtd.model import RTDModel, count_params, expected_shapes, images_to_tensor
from csrtd.tensor import Tensor
from csrtd.train import TrainConfig, model_from_checkpoint, predict, train


def record(number, title, ok, detail="", hard=True):
    line = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    if not hard:
        line += " [report only]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    if hard:
        assert ok, line


# ---------------------------------------------------------------- 1
def test_criterion_1_shape_audit_paper_config():
    start = time.time()
    model = RTDModel(PAPER, seed=0)
    trace = {}
    with T.no_grad():
        x = Tensor(np.zeros((3, 256, 256), np.float32))
        model(x, x, trace=trace)
    stated = {
        "h_goal1": (64, 64, 64), "h_goal2": (128, 32, 32), "h_goal3": (320, 16, 16), "h_goal4": (512, 8, 8),
        "h_cur1": (64, 64, 64), "h_cur2": (128, 32, 32), "h_cur3": (320, 16, 16), "h_cur4": (512, 8, 8),
        "z1": (128, 64, 64), "z2": (320, 32, 32), "z3": (1088, 16, 16), "z4": (1344, 8, 8),
        "z_down_M": (512, 8, 8), "u1": (32, 256, 256), "logits": (2, 256, 256),
    }
    wrong = {k: (trace.get(k), v) for k, v in stated.items() if trace.get(k) != v}
    schedule_ok = trace == expected_shapes(PAPER)
    elapsed = time.time() - start
    record(1, "shape audit (paper config)", not wrong and schedule_ok and elapsed < 60,
           f"{len(stated)} stated dims, {len(trace)} traced tensors, {elapsed:.1f}s" + (f", mismatches {wrong}" if wrong else ""))


# ---------------------------------------------------------------- 2
def test_criterion_2_parameter_band():
    start = time.time()
    n = count_params(RTDModel(PAPER, seed=0))
    elapsed = time.time() - start
    record(2, "parameter band 20M-30M", 20e6 <= n <= 30e6 and elapsed < 60, f"{n:,} params, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3
def test_criterion_3_gradient_suite():
    start = time.time()
    seeds = list(range(50))
    results = [check_primitive(name, seeds) for name in primitive_cases()]
    results += [model_spot_check(s) for s in (0, 1)]
    elapsed = time.time() - start
    failed = [r.line() for r in results if not r.passed]
    worst_prim = max(r.worst for r in results[:-2])
    worst_model = max(r.worst for r in results[-2:])
    record(3, "gradient suite", not failed and elapsed < 600,
           f"{len(results) - 2} primitives x 50 seeds worst {worst_prim:.1e}, model worst {worst_model:.1e}, {elapsed:.0f}s"
           + (f", failed {failed}" if failed else ""))


# ---------------------------------------------------------------- 4
def _instance(rng):
    heads = int(rng.choice([1, 2, 4]))
    c = heads * int(rng.integers(1, 4))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    mk = lambda *s: rng.standard_normal(s) * rng.uniform(0.3, 2.0)
    return heads, c, h, w, mk(c, c), mk(c, c), mk(c, c), mk(c, 3, 3)


def test_criterion_4_attention_oracles():
    rng = np.random.default_rng(2024)
    worst = {"factor": 0.0, "conv": 0.0, "cross": 0.0}
    row_err, exact_zero_p = 0.0, True
    n = 120
    with T.check_mode():
        for _ in range(n):
            heads, c, h, w, wq, wk, wv, pos = _instance(rng)
            has_cls = bool(rng.integers(0, 2))
            x = rng.standard_normal((h * w + has_cls, c))
            aw = AttnWeights(Tensor(wq), Tensor(wk), Tensor(wv), heads, Tensor(pos))
            seq = TokenSeq(Tensor(x), (h, w), has_cls)
            got_f = factor_attn(seq, aw).data
            worst["factor"] = max(worst["factor"], np.abs(got_f - oracles.factor_attn(x, wq, wk, wv, heads)).max())
            ref_c, _ = oracles.conv_attn(x, wq, wk, wv, pos, heads, (h, w), has_cls)
            worst["conv"] = max(worst["conv"], np.abs(conv_attn(seq, aw).data - ref_c).max())
            zero_p = AttnWeights(aw.wq, aw.wk, aw.wv, heads, Tensor(np.zeros_like(pos)))
            exact_zero_p &= conv_attn(seq, zero_p).data.tobytes() == factor_attn(seq, zero_p).data.tobytes()

            g, cur = rng.standard_normal((c, h, w)), rng.standard_normal((c, h, w))
            out, attn = cross_attn(Tensor(g), Tensor(cur), aw, return_attn=True)
            ref_x, _ = oracles.cross_attn(g, cur, wq, wk, wv, heads)
            worst["cross"] = max(worst["cross"], np.abs(out.data - ref_x).max())
            row_err = max(row_err, np.abs(attn.data.sum(axis=-1) - 1.0).max())
    ok = max(worst.values()) <= 1e-5 and row_err <= 1e-6 and exact_zero_p
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(4, "attention oracles", ok, f"{n} instances each, {detail}, row-sum err {row_err:.1e}, P=0 exact {exact_zero_p}")


# ---------------------------------------------------------------- 5
def test_criterion_5_correlation_oracle():
    rng = np.random.default_rng(7)
    n, mismatches = 0, 0
    with T.check_mode():
        for d in (1, 2, 3):
            for _ in range(40):
                c = int(rng.choice([1, 2, 4, 8]))
                h, w = int(rng.integers(1, 8)), int(rng.integers(1, 8))
                # integer features and power-of-two c make every sum exact in floating point
                z = rng.integers(-9, 10, size=(2 * c, h, w)).astype(np.float64)
                mismatches += not np.array_equal(correlate(Tensor(z), d).data, oracles.correlate(z, d))
                n += 1
    record(5, "correlation oracle", mismatches == 0, f"{n} instances, D in 1..3, {mismatches} mismatches")


# ---------------------------------------------------------------- 6
def test_criterion_6_loss_metric_oracles():
    rng = np.random.default_rng(11)
    problems = []
    for _ in range(100):
        y = rng.integers(0, 2, (5, 5))
        oh = one_hot(y, dtype=np.float64)
        p = rng.dirichlet([0.5, 0.5], size=(5, 5)).transpose(2, 0, 1)
        v = soft_dice(Tensor(p, dtype=np.float64), oh).item()
        if not 0.0 <= v <= 1.0 or abs(v - oracles.soft_dice(p, oh)) > 1e-12:
            problems.append(f"dice {v}")
        if soft_dice(Tensor(oh, dtype=np.float64), oh).item() > 1e-6:
            problems.append("perfect != 0")
        if abs(soft_dice(Tensor(1 - oh, dtype=np.float64), oh).item() - 1.0) > 1e-12:
            problems.append("miss != 1")
        a, b = rng.random((6, 6)) < 0.4, rng.random((6, 6)) < 0.4
        cc = confusion(a, b)
        if (cc.tp, cc.fp, cc.fn, cc.tn) != oracles.counts(a, b):
            problems.append("counts")
    grad = check_primitive("soft_dice", range(50))
    if not grad.passed:
        problems.append(grad.line())
    y = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 0]])
    pred = np.array([[1, 1, 1], [1, 0, 1], [0, 0, 0]])
    c = confusion(pred, y)
    worked = (precision(c), recall(c), f1(c), iou(c))
    if worked[0] != 0.6 or worked[1] != 0.75 or worked[3] != 0.5 or abs(worked[2] - 2 / 3) > 1e-15:
        problems.append(f"worked example {worked}")
    record(6, "loss/metric oracles", not problems,
           f"100 dice + 100 count instances, dice grad worst {grad.worst:.1e}, worked example {tuple(round(v, 4) for v in worked)}"
           + (f", problems {problems[:3]}" if problems else ""))


# ---------------------------------------------------------------- 7
def test_criterion_7_training_dynamics(desk_runs, desk_data):
    res, _, seconds = desk_runs.get("iv", 0)
    ratio = res.final_train_loss / res.initial_train_loss
    record("7a", "train loss halves", ratio < 0.5 and len(res.log) <= DESK_EPOCHS,
           f"initial {res.initial_train_loss:.3f}, final {res.final_train_loss:.3f}, ratio {ratio:.2f}, "
           f"{len(res.log)} epochs, {seconds:.0f}s")

    val, test = desk_data["val"], desk_data["test"]
    start = time.time()
    model = model_from_checkpoint(res.best)
    rep = evaluate_masks(predict(model, test.goals, test.currents), list(test.masks))
    theta = tune_threshold(val.goals, val.currents, val.masks)
    base = evaluate_masks([pixel_difference_baseline(g, c, theta) for g, c in zip(test.goals, test.currents)], list(test.masks))
    seconds += time.time() - start
    record("7b", "model beats tuned pixel-difference baseline", rep.miou > base.miou and rep.f1 > base.f1 and seconds < 1800,
           f"model F1 {rep.f1:.3f} mIoU {rep.miou:.3f} vs baseline F1 {base.f1:.3f} mIoU {base.miou:.3f} "
           f"(theta {theta:g}), total {seconds:.0f}s")

    tiny = samples_in_memory(SplitSpec(4, 1, 1), TINY.image_size, "train")
    seq = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95]
    snaps = {}

    def validate(m, epoch):
        snaps[epoch] = m.state_dict()
        return seq[epoch - 1], None

    scripted = train(TrainConfig(model=TINY, batch_size=4, max_epochs=len(seq) + 3), tiny, None, validate=validate)
    same = all(np.array_equal(scripted.best.params[k], v) for k, v in snaps[2].items())
    record("7c", "early stopping returns argmin checkpoint", len(scripted.log) == 7 and scripted.best.epoch == 2 and same,
           f"stopped after epoch {len(scripted.log)}, returned epoch {scripted.best.epoch}")


# ---------------------------------------------------------------- 8
def test_criterion_8_ablation_ordering_report(desk_runs, desk_data):
    test = desk_data["test"]
    scores = {}
    for ablation in ("iv", "ii"):
        for seed in (0, 1, 2):
            res, _, _ = desk_runs.get(ablation, seed)
            preds = predict(model_from_checkpoint(res.best), test.goals, test.currents)
            scores[ablation, seed] = evaluate_masks(preds, list(test.masks)).miou
    mean = {a: np.mean([scores[a, s] for s in (0, 1, 2)]) for a in ("iv", "ii")}
    per_seed = ", ".join(f"{a}/{s} {v:.3f}" for (a, s), v in scores.items())
    record(8, "ablation ordering mIoU(iv) >= mIoU(ii)", mean["iv"] >= mean["ii"],
           f"mean iv {mean['iv']:.3f} vs ii {mean['ii']:.3f}; {per_seed}", hard=False)


# ---------------------------------------------------------------- 9
def test_criterion_9_determinism(tmp_path):
    spec = SplitSpec(6, 2, 2, seed=9)
    build_dataset(spec, 32, tmp_path / "a")
    build_dataset(spec, 32, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    data_same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    tr = samples_in_memory(spec, 32, "train")
    va = samples_in_memory(spec, 32, "val")
    cfg = TrainConfig(model=TINY, batch_size=3, max_epochs=3, seed=5)
    with threadpool_limits(1):
        r1 = train(cfg, tr, va, log_path=tmp_path / "1.log")
        r2 = train(cfg, tr, va, log_path=tmp_path / "2.log")
    log_same = (tmp_path / "1.log").read_bytes() == (tmp_path / "2.log").read_bytes()
    params_same = all(r1.best.params[k].tobytes() == r2.best.params[k].tobytes() for k in r1.best.params)

    save_checkpoint(r1.best, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    g, c = images_to_tensor(va.goals), images_to_tensor(va.currents)
    with T.no_grad():
        fwd_same = model_from_checkpoint(r1.best)(g, c).data.tobytes() == model_from_checkpoint(back)(g, c).data.tobytes()
    ok = data_same and log_same and params_same and fwd_same
    record(9, "determinism and persistence", ok,
           f"dataset {len(files)} files identical {data_same}, training log identical {log_same}, "
           f"params identical {params_same}, checkpoint forward identical {fwd_same}")
