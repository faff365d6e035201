import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import atrpp.training as training
from atrpp.data import Dataset, EventSequence, NumericalError, Record, TimeSeries
from atrpp.model import AttentionConfig, LossConfig, forward, sequence_loss
from atrpp.training import (EpochLog, RMSpropState, TrainConfig, class_counts, class_weights,
                            clip_global_norm, new_model, read_log, rmsprop_step, total_gradient,
                            train, weights_from_counts, write_log)


def tiny_dataset(n=6, Z=3, N=6, seed=0, F=1):
    rng = np.random.default_rng(seed)
    recs, split = [], {}
    for k in range(n):
        times = np.cumsum(rng.exponential(1.0, N))
        series = TimeSeries(0.0, 1.0, rng.normal(size=(int(times[-1]) + 2, F))) if F else None
        recs.append(Record(f"r{k}", EventSequence.from_arrays(rng.integers(0, Z, N), times, Z), series))
        split[f"r{k}"] = "train" if k < n - 2 else "validation"
    return Dataset(tuple(recs), Z, split)


TINY = dict(E=3, H_event=4, H_series=3, H_syn=4)


# ---------------------------------------------------------------- class weights

def test_class_weight_examples():
    assert np.allclose(weights_from_counts([10, 30, 60]), [10 / 3, 10 / 9, 10 / 18])
    assert np.allclose(weights_from_counts([5, 5, 5, 5]), 1.0)
    w = weights_from_counts([0, 4])
    assert np.all(np.isfinite(w)) and math.isclose(w[0], 2.0)


def test_class_counts_use_targets_only():
    r = Record("a", EventSequence.from_arrays([0, 1, 1, 2], [0, 1, 2, 3], 3))
    assert class_counts([r], 3).tolist() == [0, 2, 1]
    assert np.allclose(class_weights([r], 3), 3 / (3 * np.array([1, 2, 1])))


# ---------------------------------------------------------------- optimizer

def test_rmsprop_first_step_hand_value():
    new, st_ = rmsprop_step({"x": np.array(2.0)}, {"x": np.array(1.0)}, RMSpropState(0.01, 0.9, 1e-8))
    assert math.isclose(float(new["x"]), 2.0 - 0.01 / (math.sqrt(0.1) + 1e-8), rel_tol=1e-15)
    assert math.isclose(float(st_.mean_square["x"]), 0.1)


def test_rmsprop_zero_gradient_is_noop_and_deterministic():
    params = {"a": np.arange(3.0), "b": np.ones((2, 2))}
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    new, _ = rmsprop_step(params, zero, RMSpropState())
    assert all(np.array_equal(new[k], params[k]) for k in params)
    g = {"a": np.array([0.1, -2.0, 3.0]), "b": np.full((2, 2), 0.5)}
    s = RMSpropState(mean_square={"a": np.ones(3), "b": np.ones((2, 2))})
    r1, s1 = rmsprop_step(params, g, s.copy())
    r2, s2 = rmsprop_step(params, g, s.copy())
    assert all(np.array_equal(r1[k], r2[k]) and np.array_equal(s1.mean_square[k], s2.mean_square[k]) for k in params)


@given(st.integers(0, 2**31 - 1), st.floats(1e-8, 1.0))
@settings(max_examples=50)
def test_rmsprop_step_size_bound(seed, lr):
    rng = np.random.default_rng(seed)
    theta = {"w": rng.normal(size=5)}
    g = {"w": rng.normal(size=5) * 10 ** rng.uniform(-3, 3)}
    state = RMSpropState(lr, 0.9, 1e-8, {"w": rng.uniform(0, 2, 5)})
    new, st_ = rmsprop_step(theta, g, state)
    assert np.all(st_.mean_square["w"] >= 0)
    step = np.linalg.norm(new["w"] - theta["w"])
    bound = lr * np.linalg.norm(g["w"] / (np.sqrt(st_.mean_square["w"]) + 1e-8))
    # theta - delta is rounded to theta's precision
    assert step <= bound * (1 + 1e-12) + 4 * np.finfo(float).eps * np.linalg.norm(theta["w"])


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_global_norm(g, 1.0)
    assert norm == 5.0
    assert np.allclose(clipped["a"], 0.6) and np.allclose(clipped["b"], 0.8)
    same, _ = clip_global_norm(g, None)
    assert same is g


# ---------------------------------------------------------------- training loop

def test_total_gradient_is_sum_of_records():
    ds = tiny_dataset()
    cfg = TrainConfig(**TINY, init_scale=0.5)
    params = new_model(ds, cfg)
    r1, r2 = ds.train[:2]
    b = np.array([1.0, 2.0, 0.5])
    g12 = total_gradient([r1, r2], params, b, cfg)
    g1 = total_gradient([r1], params, b, cfg)
    g2 = total_gradient([r2], params, b, cfg)
    for k in g12:
        assert np.allclose(g12[k], g1[k] + g2[k], rtol=1e-13, atol=0)
    # and it is the derivative of the summed loss
    k, ix = "v", (1, 2)
    old = params.tensors[k][ix]

    def summed():
        return sum(sequence_loss(forward(r, params, cfg.attention), b, cfg.loss) for r in (r1, r2))

    params.tensors[k][ix] = old + 1e-5
    lp = summed()
    params.tensors[k][ix] = old - 1e-5
    lm = summed()
    params.tensors[k][ix] = old
    assert math.isclose((lp - lm) / 2e-5, g12[k][ix], rel_tol=1e-5, abs_tol=1e-9)


def test_training_loss_decreases_on_one_record():
    ds = tiny_dataset(n=3, N=8, F=0)
    one = Dataset(ds.records, ds.num_dims, {"r0": "train", "r1": "validation", "r2": "test"})
    cfg = TrainConfig(**TINY, max_epochs=4, patience=4, lr=1e-3, loss=LossConfig(time_loss_weight=0.1))
    res = train(one, cfg)
    losses = [e.train_loss for e in res.log]
    assert len(losses) == 4
    assert sum(b <= a + 1e-6 for a, b in zip(losses, losses[1:])) >= 2


def test_training_is_deterministic():
    ds = tiny_dataset()
    cfg = TrainConfig(**TINY, max_epochs=2, seed=5)
    a, b = train(ds, cfg), train(ds, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params.tensors)
    assert [e.val_loss for e in a.log] == [e.val_loss for e in b.log]


def test_early_stopping_returns_best_epoch(monkeypatch):
    ds = tiny_dataset()
    scripted = iter([3.0, 2.0, 2.5, 1.0, 0.5])
    monkeypatch.setattr(training, "evaluate_loss", lambda *a: next(scripted))
    cfg = TrainConfig(**TINY, max_epochs=10, patience=1, seed=2)
    res = train(ds, cfg)
    assert [e.epoch for e in res.log] == [1, 2, 3]
    assert res.best_epoch == 2
    monkeypatch.undo()
    two = train(ds, TrainConfig(**TINY, max_epochs=2, seed=2))
    assert all(np.array_equal(res.params[k], two.last_params[k]) for k in res.params.tensors)


def test_returned_params_have_minimum_logged_val_loss():
    ds = tiny_dataset()
    cfg = TrainConfig(**TINY, max_epochs=4, patience=2, lr=0.02)
    res = train(ds, cfg)
    best = min(res.log, key=lambda e: e.val_loss)
    assert res.best_epoch == best.epoch
    b = res.class_weights
    assert math.isclose(training.evaluate_loss(res.params, ds.validation, b, cfg), best.val_loss, rel_tol=1e-12)


def test_resume_continues_epoch_counter():
    ds = tiny_dataset()
    cfg = TrainConfig(**TINY, max_epochs=2, patience=5)
    first = train(ds, cfg)
    more = train(ds, cfg, init=first.last_params, optimizer=first.optimizer, start_epoch=2, history=first.log)
    assert [e.epoch for e in more.log] == [1, 2, 3, 4]


def test_non_finite_loss_names_record():
    ds = tiny_dataset()
    cfg = TrainConfig(**TINY, max_epochs=1)
    params = new_model(ds, cfg)
    params.tensors["b_s"] = np.asarray(np.nan)
    with pytest.raises(NumericalError, match=r"record 'r\d' at step 1"):
        train(ds, cfg, init=params)


def test_event_only_training_flags_variant():
    ds = tiny_dataset()
    res = train(ds, TrainConfig(**TINY, max_epochs=1, use_series=False))
    assert res.params.arch.variant == "AERPP"
    assert not any(k.startswith("series.") for k in res.params.tensors)


def test_normalization_from_train_split():
    ds = tiny_dataset()
    params = new_model(ds, TrainConfig(**TINY))
    gaps = np.concatenate([np.diff(r.sequence.times) for r in ds.train])
    assert math.isclose(params.time_scale, gaps.mean())
    Y = np.concatenate([r.series.samples for r in ds.train])
    assert np.allclose(params.series_mean, Y.mean(axis=0))


def test_log_round_trip(tmp_path):
    entries = [EpochLog(1, 2.5, 2.25, 1.0), EpochLog(2, 1.0 / 3, 0.1, 0.5)]
    write_log(entries, tmp_path / "log.csv")
    assert read_log(tmp_path / "log.csv") == entries


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ValueError):
        LossConfig(sigma=0)
    with pytest.raises(ValueError):
        AttentionConfig(epsilon=1.5)
