"""Loss and optimizer hand oracles, the epoch loop, checkpoint selection."""

import math

import pytest
import torch

import tumorseg.training as training
from conftest import ellipse_dataset
from tumorseg.errors import (
    DivergedLoss,
    EmptyHistory,
    EmptySplit,
    NonFiniteGradient,
    ShapeMismatch,
)
from tumorseg.metrics import evaluate_split
from tumorseg.models import ArchConfig, build_model, load_model, read_sidecar
from tumorseg.training import (
    CLAMP_EPS,
    AdamState,
    EpochStats,
    HISTORY_HEADER,
    RunHistory,
    TrainConfig,
    adam_step,
    bce_loss,
    select_checkpoint,
    train_run,
)


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.learning_rate == 1e-3
    assert cfg.beta1 == 0.9
    assert cfg.beta2 == 0.999
    assert cfg.epsilon == 1e-7
    assert cfg.batch_size == 32
    assert cfg.epochs == 100
    assert cfg.threshold == 0.5
    assert cfg.checkpoint_metric == "val_miou"
    assert cfg.optimizer == "adam" and cfg.loss == "bce"
    cfg.validate()
    for bad in (
        TrainConfig(learning_rate=0.0),
        TrainConfig(beta1=1.0),
        TrainConfig(beta2=-0.1),
        TrainConfig(epsilon=0.0),
        TrainConfig(batch_size=0),
        TrainConfig(epochs=0),
        TrainConfig(threshold=1.0),
        TrainConfig(checkpoint_metric="train_loss"),
        TrainConfig(optimizer="sgd"),
        TrainConfig(loss="dice"),
    ):
        with pytest.raises(ValueError):
            bad.validate()


def test_bce_hand_values():
    half = torch.full((2, 3), 0.5, dtype=torch.float64)
    assert float(bce_loss(half, torch.ones(2, 3, dtype=torch.float64))) == math.log(2.0)
    # A perfect hard prediction costs only the clamp epsilon.
    perfect = bce_loss(
        torch.tensor([1.0, 0.0], dtype=torch.float64),
        torch.tensor([1.0, 0.0], dtype=torch.float64),
    )
    assert 0.99e-7 < float(perfect) < 1.01e-7
    assert abs(float(perfect) - (-math.log(1.0 - CLAMP_EPS))) < 1e-15
    with pytest.raises(ShapeMismatch):
        bce_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_bce_gradient_hand_value():
    p = torch.full((4,), 0.8, requires_grad=True)
    bce_loss(p, torch.ones(4)).backward()
    want = -1.0 / (0.8 * 4)
    assert torch.allclose(p.grad, torch.full((4,), want), atol=1e-7)


def manual_adam(p0, grads, cfg):
    """Pure-python replay of the documented update rule."""
    p, m, v = p0, 0.0, 0.0
    out = []
    for step, g in enumerate(grads, start=1):
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** step)
        v_hat = v / (1.0 - cfg.beta2 ** step)
        p = p - cfg.learning_rate * m_hat / (math.sqrt(v_hat) + cfg.epsilon)
        out.append(p)
    return out


def test_adam_three_step_hand_recurrence():
    cfg = TrainConfig(learning_rate=0.01)
    grads = [0.3, -0.5, 0.2]
    params = [torch.tensor([1.0], dtype=torch.float64)]
    state = AdamState.zeros(params)
    want = manual_adam(1.0, grads, cfg)
    for g, expected in zip(grads, want):
        adam_step(params, [torch.tensor([g], dtype=torch.float64)], state, cfg)
        assert abs(float(params[0]) - expected) <= 1e-12 * max(1.0, abs(expected))
    assert state.step == 3


def test_adam_first_step_is_learning_rate_sized():
    cfg = TrainConfig()
    params = [torch.zeros(5, dtype=torch.float64)]
    state = AdamState.zeros(params)
    adam_step(params, [torch.ones(5, dtype=torch.float64)], state, cfg)
    # m_hat = 1, sqrt(v_hat) = 1, so the step is exactly lr / (1 + eps).
    want = -cfg.learning_rate / (1.0 + cfg.epsilon)
    assert torch.allclose(
        params[0], torch.full((5,), want, dtype=torch.float64), rtol=1e-12, atol=0.0
    )
    magnitude = float(params[0].abs().max())
    assert cfg.learning_rate * (1.0 - 1e-6) <= magnitude <= cfg.learning_rate


def test_adam_zero_gradient_is_fixed_point():
    cfg = TrainConfig()
    params = [torch.randn(4, 3, dtype=torch.float64)]
    before = params[0].clone()
    state = AdamState.zeros(params)
    adam_step(params, [torch.zeros(4, 3, dtype=torch.float64)], state, cfg)
    assert torch.equal(params[0], before)
    assert state.step == 1


def test_adam_rejects_bad_input():
    cfg = TrainConfig()
    params = [torch.zeros(2)]
    with pytest.raises(NonFiniteGradient):
        adam_step(params, [torch.tensor([1.0, float("nan")])], AdamState.zeros(params), cfg)
    with pytest.raises(ValueError):
        adam_step(params, [], AdamState.zeros(params), cfg)


def test_select_checkpoint():
    assert select_checkpoint([0.5, 0.7, 0.65]) == 2
    assert select_checkpoint([0.5, 0.7, 0.7]) == 2  # earliest tie wins
    assert select_checkpoint([0.9, 0.4, 0.4], metric="val_loss") == 2
    history = RunHistory(rows=[
        EpochStats(1, 0.9, 0.8, 0.3, 1.0),
        EpochStats(2, 0.7, 0.6, 0.6, 1.0),
        EpochStats(3, 0.6, 0.7, 0.5, 1.0),
    ])
    assert select_checkpoint(history) == 2
    assert select_checkpoint(history, metric="val_loss") == 2
    with pytest.raises(EmptyHistory):
        select_checkpoint([])


def test_history_csv_round_trip(tmp_path):
    history = RunHistory(rows=[
        EpochStats(1, 0.51, 0.62, 0.125, 1.5),
        EpochStats(2, 0.25, 0.5, 0.5, 2.25),
    ])
    path = history.to_csv(tmp_path / "history.csv")
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode().splitlines()[0] == ",".join(HISTORY_HEADER)
    loaded = RunHistory.from_csv(path)
    assert loaded == history
    (tmp_path / "bad.csv").write_text("epoch,loss\n1,0.5\n", encoding="utf-8")
    with pytest.raises(ValueError):
        RunHistory.from_csv(tmp_path / "bad.csv")


def small_model(seed=0):
    return build_model(
        ArchConfig(family="unet", depth=1, base_width=4, input_size=(8, 8), seed=seed)
    )


def small_data(n=6, seed=0):
    return ellipse_dataset(n, 8, seed=seed)


def test_train_run_is_deterministic():
    data = small_data()
    cfg = TrainConfig(epochs=3, batch_size=2, seed=5)
    hist_a = train_run(small_model(seed=1), data, data, cfg)
    hist_b = train_run(small_model(seed=1), data, data, cfg)
    assert [r.train_loss for r in hist_a.rows] == [r.train_loss for r in hist_b.rows]
    assert [r.val_miou for r in hist_a.rows] == [r.val_miou for r in hist_b.rows]


class _Recording:
    """List-backed dataset that records every index it serves."""

    def __init__(self, items):
        self.items = items
        self.accessed = []

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        self.accessed.append(i)
        return self.items[i]


def test_each_epoch_visits_every_sample_once():
    train = _Recording(small_data(8, seed=3))
    val = small_data(2, seed=30)
    train_run(small_model(), train, val, TrainConfig(epochs=2, batch_size=3, seed=0))
    first, second = train.accessed[:8], train.accessed[8:]
    assert sorted(first) == list(range(8))
    assert sorted(second) == list(range(8))
    assert first != second  # reshuffled between epochs


def test_checkpoint_keeps_earliest_best_epoch(tmp_path, monkeypatch):
    scripted = [(0.5, 0.2), (0.4, 0.9), (0.3, 0.9), (0.2, 0.3)]
    calls = iter(scripted)
    monkeypatch.setattr(training, "_validate", lambda *a, **k: next(calls))
    path = tmp_path / "best.pt"
    history = train_run(
        small_model(), small_data(4), small_data(2),
        TrainConfig(epochs=4, batch_size=4, seed=0), checkpoint_path=path,
    )
    assert read_sidecar(path)["epoch"] == 2
    assert read_sidecar(path)["val_miou"] == 0.9
    assert select_checkpoint(history) == 2
    assert [r.val_miou for r in history.rows] == [0.2, 0.9, 0.9, 0.3]


def test_checkpoint_metric_val_loss(tmp_path, monkeypatch):
    scripted = [(0.5, 0.2), (0.7, 0.9), (0.4, 0.1)]
    calls = iter(scripted)
    monkeypatch.setattr(training, "_validate", lambda *a, **k: next(calls))
    path = tmp_path / "best.pt"
    train_run(
        small_model(), small_data(4), small_data(2),
        TrainConfig(epochs=3, batch_size=4, seed=0, checkpoint_metric="val_loss"),
        checkpoint_path=path,
    )
    assert read_sidecar(path)["epoch"] == 3


def test_single_sample_overfit():
    data = small_data(1, seed=11)
    cfg = TrainConfig(learning_rate=1e-2, epochs=300, batch_size=1, seed=0)
    history = train_run(small_model(seed=2), data, data, cfg)
    assert history.rows[-1].train_loss < 0.01
    assert len(history.rows) == 300
    assert [r.epoch for r in history.rows[:3]] == [1, 2, 3]


def test_checkpoint_score_matches_reload(tmp_path):
    data = small_data(4, seed=7)
    cfg = TrainConfig(epochs=3, batch_size=2, seed=1)
    path = tmp_path / "best.pt"
    history = train_run(small_model(seed=3), data, data, cfg, checkpoint_path=path)
    meta = read_sidecar(path)
    assert meta["epoch"] == select_checkpoint(history)
    model = load_model(path)
    rescored = evaluate_split(
        model, data, split="val", threshold=cfg.threshold, batch_size=cfg.batch_size
    )
    assert abs(rescored.mean_iou - meta["val_miou"]) < 1e-6


def test_diverged_loss_carries_history():
    model = small_model()
    with torch.no_grad():
        model.head.weight.fill_(float("nan"))
    with pytest.raises(DivergedLoss) as info:
        train_run(model, small_data(2), small_data(2),
                  TrainConfig(epochs=2, batch_size=2, seed=0))
    assert isinstance(info.value.history, RunHistory)
    assert info.value.history.rows == []


def test_train_run_rejects_empty_splits():
    with pytest.raises(EmptySplit):
        train_run(small_model(), [], small_data(2), TrainConfig(epochs=1))
    with pytest.raises(EmptySplit):
        train_run(small_model(), small_data(2), [], TrainConfig(epochs=1))
