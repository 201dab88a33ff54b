import math

import numpy as np
import pytest

from csrtd import nn
from csrtd import tensor as T
from csrtd.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from csrtd.config import DESK, PAPER, TINY
from csrtd.data import SplitSpec, samples_in_memory
from csrtd.metrics import evaluate_masks
from csrtd.model import RTDModel, count_params, images_to_tensor
from csrtd.nn import InitSpec, Param
from csrtd.train import (
    AdamState,
    EarlyStopping,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    model_from_checkpoint,
    train,
)


def scalar(x, name="x"):
    return Param(np.array([x], dtype=np.float64), InitSpec("zeros"), name)


# ---------------------------------------------------------------- parameter counts
def test_count_params_single_conv():
    assert nn.count_params(nn.Conv2d(np.random.default_rng(0), 2, 4, 3)) == 76


def test_count_params_ablation_order_and_paper_band():
    assert count_params(RTDModel(DESK.with_(ablation="ii"))) < count_params(RTDModel(DESK))
    n = count_params(RTDModel(PAPER))
    assert 20_000_000 <= n <= 30_000_000


# ---------------------------------------------------------------- Adam
def test_adam_zero_grad_leaves_params():
    p = scalar(1.5)
    state = AdamState()
    for _ in range(3):
        p.grad = np.zeros(1)
        adam_step([p], state, 1e-3)
    assert p.data[0] == 1.5
    assert state.t == 3 and state.m["x"][0] == 0.0


@pytest.mark.parametrize("g", [0.37, -4.0, 1e3])
def test_adam_first_step_is_lr_sign(g):
    p = scalar(0.0)
    p.grad = np.array([g])
    adam_step([p], AdamState(), 1e-3)
    assert p.data[0] == pytest.approx(-1e-3 * math.copysign(1, g), rel=1e-6)


def test_adam_matches_reference_trace_on_quadratic():
    lr, (b1, b2), eps = 0.1, (0.5, 0.999), 1e-8
    x, m, v = 5.0, 0.0, 0.0
    ref = []
    for t in range(1, 11):
        g = 2 * (x - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        ref.append(x)
    p, state = scalar(5.0), AdamState()
    got = []
    for _ in range(10):
        p.grad = 2 * (p.data - 3.0)
        adam_step([p], state, lr, (b1, b2), eps)
        got.append(p.data[0])
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_adam_missing_grad():
    with pytest.raises(ValueError, match="missing gradients"):
        adam_step([scalar(0.0, "w")], AdamState(), 1e-3)


# ---------------------------------------------------------------- early stopping
def test_early_stopping_rule_trace():
    stop = EarlyStopping(5)
    seq = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95]
    for epoch, loss in enumerate(seq, 1):
        stop.update(epoch, loss)
        assert stop.should_stop == (epoch == 7)
    assert stop.best_epoch == 2


@pytest.fixture(scope="module")
def tiny_data():
    spec = SplitSpec(6, 3, 3, seed=0)
    return samples_in_memory(spec, TINY.image_size, "train"), samples_in_memory(spec, TINY.image_size, "val")


def test_train_returns_argmin_checkpoint(tiny_data, tmp_path):
    tr, va = tiny_data
    seq = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95, 0.1]
    snapshots = {}

    def validate(model, epoch):
        snapshots[epoch] = {k: v.copy() for k, v in model.state_dict().items()}
        return seq[epoch - 1], None

    cfg = TrainConfig(model=TINY, batch_size=6, max_epochs=20)
    res = train(cfg, tr, None, log_path=tmp_path / "log", ckpt_path=tmp_path / "c.ckpt", validate=validate)
    assert len(res.log) == 7 and res.stopped_early
    assert res.best.epoch == 2 and res.best.best_val_loss == 0.9
    for k, v in snapshots[2].items():
        np.testing.assert_array_equal(res.best.params[k], v)
    assert load_checkpoint(tmp_path / "c.ckpt").epoch == 2
    assert len((tmp_path / "log").read_text().splitlines()) == 7


def test_training_log_format_and_reproducibility(tiny_data, tmp_path):
    tr, va = tiny_data
    cfg = TrainConfig(model=TINY, batch_size=3, max_epochs=2, seed=4)
    train(cfg, tr, va, log_path=tmp_path / "a.log")
    train(cfg, tr, va, log_path=tmp_path / "b.log")
    a = (tmp_path / "a.log").read_text()
    assert a == (tmp_path / "b.log").read_text()
    first = a.splitlines()[0].split()
    assert [f.split("=")[0] for f in first] == ["epoch", "train_loss", "val_loss", "val_miou", "val_f1"]


def test_empty_splits_rejected(tiny_data):
    tr, _ = tiny_data
    empty = type(tr)(tr.goals[:0], tr.currents[:0], tr.masks[:0], [])
    with pytest.raises(ValueError, match="empty"):
        train(TrainConfig(model=TINY), empty, tr)
    with pytest.raises(ValueError, match="empty"):
        train(TrainConfig(model=TINY), tr, empty)


def test_divergence_aborts(tiny_data):
    tr, _ = tiny_data
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train(TrainConfig(model=TINY, max_epochs=1), tr, None, validate=lambda m, e: (float("nan"), None))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------- checkpoints
def test_checkpoint_round_trip_bit_identical(tiny_data, tmp_path):
    tr, va = tiny_data
    res = train(TrainConfig(model=TINY, batch_size=6, max_epochs=1), tr, va)
    path = tmp_path / "m.ckpt"
    save_checkpoint(res.best, path)
    back = load_checkpoint(path)
    assert back.config == TINY and back.epoch == 1 and back.step == res.best.step
    assert set(back.moments) == set(res.best.moments)
    a, b = model_from_checkpoint(res.best), model_from_checkpoint(back)
    g, c = images_to_tensor(va.goals), images_to_tensor(va.currents)
    with T.no_grad():
        assert a(g, c).data.tobytes() == b(g, c).data.tobytes()
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_untrained_model_reports_sensible_metrics(tiny_data):
    _, va = tiny_data
    preds = RTDModel(TINY).predict(va.goals, va.currents)
    rep = evaluate_masks(list(preds), list(va.masks))
    assert 0.0 <= rep.f1 <= 1.0 and rep.n_samples == 3
