import copy
import csv
import math
import random

import numpy as np
import pytest
import torch

import hetperf.training as training
from hetperf.errors import EmptyDataset, InvalidArgument
from hetperf.evidential import LossConfig, NigParams, nig_nll, scaled_report
from hetperf.surrogate import HeteroGAT, ModelConfig, collate
from hetperf.training import (
    CalibrationParams,
    SampleSet,
    TargetScaler,
    TrainConfig,
    calibrate,
    fit_temperature,
    golden_section,
    grad_check,
    relative_error,
    train_stage1,
    train_stage2,
    write_training_log,
)

from conftest import TINY, TINY_NO_DROPOUT, jitter_parameters, random_graph
from nig_oracles import sample_nig_targets

FAST = TrainConfig(batch_size=16, patience=100)
MICRO = ModelConfig(hidden=4, layers=1, heads=1, encoder_depth=1, trunk_width=4, trunk_depth=1, dropout=0.0, edge_dropout=0.0, feature_noise=0.0)


def fresh_model(train: SampleSet, cfg=TINY, seed=42) -> HeteroGAT:
    model = HeteroGAT(cfg, seed=seed)
    model.fit_scaler(train.graphs)
    return model


def weighted_mse(model, s: SampleSet) -> float:
    var = s.y.var(axis=0)
    g = model.predict(s.graphs).gamma
    return float(np.sum(np.mean((g - s.y) ** 2, axis=0) / var))


def params(model):
    return [p.detach().clone() for p in model.parameters()]


# ---------------------------------------------------------------- stage 1


def test_stage1_lowers_train_loss(toy_samples):
    train, val, _ = toy_samples
    model = fresh_model(train)
    before = weighted_mse(model, train)
    res = train_stage1(model, train, val, FAST, epochs=30)
    assert weighted_mse(model, train) < before
    assert res.max_clipped_norm <= 1.0 + 1e-9


def test_stage1_is_reproducible(toy_samples):
    train, val, _ = toy_samples
    runs = []
    for _ in range(2):
        model = fresh_model(train)
        res = train_stage1(model, train, val, FAST, epochs=4)
        runs.append(([(r.loss, r.mae, r.grad_norm) for r in res.history], params(model)))
    assert repr(runs[0][0]) == repr(runs[1][0])
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_stage1_zero_lr_keeps_parameters(toy_samples):
    train, val, _ = toy_samples
    model = fresh_model(train)
    before = params(model)
    train_stage1(model, train, val, TrainConfig(lr_stage1=0.0, batch_size=16), epochs=2)
    assert all(torch.equal(a, b) for a, b in zip(before, params(model)))


def test_stage1_returns_best_checkpoint(toy_samples):
    train, val, _ = toy_samples
    model = fresh_model(train)
    res = train_stage1(model, train, val, FAST, epochs=12)
    val_scores = [r.loss for r in res.history if r.split == "val"]
    assert res.best_score == min(val_scores)
    assert training._mean_mae(model, collate(val.graphs), val.y) == pytest.approx(res.best_score, abs=1e-12)


def test_stage1_early_stop(toy_samples):
    train, val, _ = toy_samples
    model = fresh_model(train)
    res = train_stage1(model, train, val, TrainConfig(batch_size=16, patience=2, lr_stage1=0.0), epochs=20)
    # nothing improves with a zero step, so patience ends the run after two epochs
    assert max(r.epoch for r in res.history) == 2 and res.best_epoch == 0


def test_stages_need_data(toy_samples):
    train, val, _ = toy_samples
    empty = train.subset([])
    with pytest.raises(EmptyDataset):
        train_stage1(fresh_model(train), empty, val)
    with pytest.raises(EmptyDataset):
        train_stage2(fresh_model(train), train, empty)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        TrainConfig(clip_norm=0.0)
    with pytest.raises(InvalidArgument):
        TrainConfig(lr_stage1=-1.0)


# ---------------------------------------------------------------- stage 2


@pytest.fixture(scope="module")
def stage1_model(toy_samples):
    train, val, _ = toy_samples
    model = fresh_model(train)
    res = train_stage1(model, train, val, FAST, epochs=20)
    return model, res


def test_stage2_improves_validation_nll(toy_samples, stage1_model):
    train, val, _ = toy_samples
    model = copy.deepcopy(stage1_model[0])
    res = train_stage2(model, train, val, TrainConfig(batch_size=16, lr_stage2=1e-3), epochs=15, stage1_val_mae=stage1_model[1].val_mae)
    start = res.history[0].loss
    assert res.best_epoch > 0 and res.best_score < start
    assert res.max_clipped_norm <= 1.0 + 1e-9


def test_stage2_guard_blocks_worse_accuracy(toy_samples, stage1_model):
    train, val, _ = toy_samples
    model = copy.deepcopy(stage1_model[0])
    before = params(model)
    res = train_stage2(model, train, val, TrainConfig(batch_size=16, lr_stage2=1e-3), epochs=3, stage1_val_mae=1e-9)
    assert res.best_epoch == 0 and not res.guard_ok
    assert all(torch.equal(a, b) for a, b in zip(before, params(model)))


def test_stage2_without_weights_is_pure_nll(toy_samples, stage1_model, monkeypatch):
    train, val, _ = toy_samples
    cfg = TrainConfig(batch_size=16, lr_stage2=1e-3)

    def run(loss_cfg):
        model = copy.deepcopy(stage1_model[0])
        return [r.loss for r in train_stage2(model, train, val, cfg, loss_cfg, epochs=2).history]

    plain = run(LossConfig(lam=0.0, rho_rank=0.0))
    monkeypatch.setattr(training, "evidential_loss", lambda y, p, c, pairs: nig_nll(y, p).mean())
    assert plain == run(LossConfig(lam=0.0, rho_rank=0.0))


# ---------------------------------------------------------------- calibration


def test_golden_section_on_quadratic():
    assert golden_section(lambda x: (x - 0.3) ** 2, -2, 5, tol=1e-9) == pytest.approx(0.3, abs=1e-8)


def _synthetic_params(rng, n):
    return NigParams(rng.normal(0, 1, n), rng.uniform(0.5, 3, n), rng.uniform(3, 8, n), rng.uniform(0.5, 2, n))


def test_temperature_near_one_for_own_samples():
    rng = np.random.default_rng(0)
    p = _synthetic_params(rng, 4000)
    y = sample_nig_targets(rng, p.gamma, p.nu, p.alpha, p.beta, 4000)
    assert 0.9 <= fit_temperature(y, p) <= 1.1


def test_temperature_near_two_for_doubled_noise():
    rng = np.random.default_rng(1)
    p = _synthetic_params(rng, 4000)
    y = p.gamma + 2.0 * (sample_nig_targets(rng, p.gamma, p.nu, p.alpha, p.beta, 4000) - p.gamma)
    assert fit_temperature(y, p) == pytest.approx(2.0, rel=0.15)


def test_calibrate_on_model_predictive_samples():
    rng = random.Random(4)
    model = HeteroGAT(TINY, seed=5)
    graphs = [random_graph(rng) for _ in range(60)] * 30
    p = model.predict(graphs)
    y = sample_nig_targets(np.random.default_rng(2), p.gamma, p.nu, p.alpha, p.beta, p.gamma.shape)
    cal = calibrate(model, SampleSet(graphs, y, ["desk4"] * len(graphs), ["x"] * len(graphs)))
    assert all(0.9 <= t <= 1.1 for t in cal.temperatures)
    assert len(cal.ece_before) == len(cal.ece_after) == 5


def test_temperature_keeps_means():
    p = NigParams(np.array([1.0, -2.0]), np.ones(2), np.full(2, 3.0), np.ones(2))
    assert np.array_equal(scaled_report(p, 3.7).mean, p.gamma)


def test_calibration_params_round_trip_and_checks():
    c = CalibrationParams((1.0, 2.0, 0.5, 1.5, 3.0), (0.1,) * 5, (0.01,) * 5)
    assert CalibrationParams.from_json(c.to_json()) == c
    with pytest.raises(InvalidArgument):
        CalibrationParams((1.0, 0.0))
    with pytest.raises(EmptyDataset):
        fit_temperature([], NigParams(np.zeros(0), np.ones(0), np.ones(0), np.ones(0)))


def test_target_scaler_round_trip(toy_rows):
    scaler = TargetScaler.fit(toy_rows)
    z = scaler.transform(toy_rows)
    devices = [r.device_id for r in toy_rows]
    back = scaler.to_original(z, devices)
    assert np.allclose(back[:, 0], [r.elapsed_time for r in toy_rows], rtol=1e-12)
    assert TargetScaler.from_json(scaler.to_json()).stats == scaler.stats


# ---------------------------------------------------------------- gradient check


def test_relative_error_conventions():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)
    # one exact zero: the floor keeps the ratio bounded
    assert relative_error(0.0, 1e-10) == pytest.approx(1e-4)


def test_grad_check_small_model():
    rng = random.Random(8)
    graphs = [random_graph(rng) for _ in range(5)]
    model = HeteroGAT(MICRO, seed=1)
    model.fit_scaler(graphs)
    jitter_parameters(model, seed=1)
    y = np.random.default_rng(0).normal(size=(5, 5))
    res = grad_check(model, graphs, y, LossConfig(), [(0, 1), (2, 4)])
    assert res.max_rel_error < 1e-4
    assert res.checked == model.parameter_count()


def test_finite_difference_error_scales_quadratically():
    rng = random.Random(9)
    graphs = [random_graph(rng) for _ in range(3)]
    model = HeteroGAT(TINY_NO_DROPOUT, seed=2)
    model.fit_scaler(graphs)
    y = torch.tensor(np.random.default_rng(3).normal(size=(3, 5)))
    batch = collate(graphs)
    theta = model.heads[0].bias  # gamma of the first target

    def loss():
        return training.evidential_loss(y, model(batch), LossConfig())

    model.zero_grad()
    loss().backward()
    exact = float(theta.grad[0])
    errors = []
    with torch.no_grad():
        orig = float(theta[0])
        for h in (1e-3, 1e-2):
            theta[0] = orig + h
            up = float(loss())
            theta[0] = orig - h
            down = float(loss())
            theta[0] = orig
            errors.append(abs((up - down) / (2 * h) - exact))
    assert 50 < errors[1] / errors[0] < 200


# ---------------------------------------------------------------- log


def test_training_log_columns(tmp_path, toy_samples):
    train, val, _ = toy_samples
    res = train_stage1(fresh_model(train), train, val, FAST, epochs=1)
    write_training_log(tmp_path / "log.csv", res.history)
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0][:4] == ["stage", "epoch", "split", "loss"] and rows[0][-1] == "grad_norm"
    assert len(rows) == 1 + len(res.history)
    assert all(math.isfinite(float(v)) or v == "nan" for v in rows[1][3:])
