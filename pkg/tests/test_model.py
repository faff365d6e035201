import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _gradcheck import check, checked_instance, random_instance
from atrpp.data import DataError, EventSequence, Record, TimeSeries
from atrpp.model import (Architecture, AttentionConfig, ForwardTrace, LossConfig, ModelParams,
                         attention_score, context_vector, embed, extract_infectivity, forward,
                         gradients, init_params, load_checkpoint, loss_terms, predict_next,
                         save_checkpoint, sequence_loss, tensor_shapes)


def zero_params(arch):
    return ModelParams(arch, {k: np.zeros(s) for k, s in tensor_shapes(arch).items()})


def rec(dims, times, Z, series=None, rid="r"):
    return Record(rid, EventSequence.from_arrays(dims, times, Z), series)


def random_model(seed, Z=4, F=2, H=6, scale=0.5):
    rng = np.random.default_rng(seed)
    arch = Architecture(Z=Z, F=F, E=3, H_event=H, H_series=H, H_syn=H)
    return init_params(arch, rng, scale=scale), rng


def random_record(rng, Z, N, F=2):
    times = np.cumsum(rng.exponential(1.0, N))
    series = TimeSeries(0.0, 0.5, rng.normal(size=(int(times[-1] / 0.5) + 2, F))) if F else None
    return rec(rng.integers(0, Z, N), times, Z, series)


# ---------------------------------------------------------------- primitives

def test_embed_examples():
    assert np.array_equal(embed(2, np.eye(4)), np.eye(4)[2])
    assert not embed(1, np.zeros((3, 4))).any()
    with pytest.raises(IndexError):
        embed(4, np.eye(4))


def test_attention_score_examples():
    assert attention_score(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    assert attention_score(np.array([0.005]), np.array([1.0]), 0.01) == 0.0
    assert math.isclose(attention_score(np.array([1.0, 1.0]), np.array([1.0, 1.0])), 0.9640275800758169)
    assert math.isclose(attention_score(np.array([-2.0]), np.array([1.0])), math.tanh(2.0))


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_attention_score_range_and_threshold_monotone(h, v):
    scores = [attention_score(np.array(h), np.array(v), e) for e in (0.0, 0.01, 0.1, 0.5, 1.0)]
    assert all(0 <= s <= 1 for s in scores)
    assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_context_vector_examples():
    h1, h2 = np.array([1.0, -2.0]), np.array([0.5, 4.0])
    assert np.array_equal(context_vector(h1[None], [1.0]), h1)
    assert not context_vector(np.stack([h1, h2]), [0.0, 0.0]).any()
    assert np.allclose(context_vector(np.stack([h1, h2]), [0.5, 0.25]), [0.625, 0.0])
    assert np.allclose(context_vector(np.stack([h1, h2]), [0.5, 0.25], window=1), 0.25 * h2)


# ---------------------------------------------------------------- forward

def test_zero_params_give_uniform_distribution():
    arch = Architecture(Z=3)
    tr = forward(rec([0, 1], [0.0, 1.0], 3), zero_params(arch))
    assert np.allclose(tr.probs, [[1 / 3] * 3])
    assert predict_next(rec([2], [0.0], 3), zero_params(arch)).dim == 0


@given(st.integers(0, 2**31 - 1), st.integers(2, 12), st.sampled_from([0.0, 0.01, 0.3]),
       st.sampled_from([None, 1, 3]))
@settings(max_examples=30, deadline=None)
def test_probabilities_valid_and_weights_bounded(seed, N, eps, window):
    params, rng = random_model(seed % 1000, scale=2.0)
    tr = forward(random_record(rng, 4, N), params, AttentionConfig(eps, window))
    assert np.all(tr.probs >= 0) and np.allclose(tr.probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((tr.alpha >= 0) & (tr.alpha < 1))
    assert np.all((tr.alpha == 0) | (tr.alpha >= eps))
    assert np.all(tr.pred_gaps >= 0)


def test_contexts_match_direct_sums():
    params, rng = random_model(4)
    r = random_record(rng, 4, 9)
    for window in (None, 2, 5):
        tr = forward(r, params, AttentionConfig(0.01, window))
        for j in range(tr.num_steps):
            for z in range(4):
                lo = 0 if window is None else max(0, j + 1 - window)
                direct = context_vector(tr.h_event[: j + 1], tr.alpha[: j + 1, z], window)
                assert np.allclose(tr.contexts[j, z], direct)
                manual = sum(tr.alpha[i, z] * tr.h_event[i] for i in range(lo, j + 1))
                assert np.allclose(tr.contexts[j, z], manual)
                assert math.isclose(tr.alpha[j, z], attention_score(tr.h_event[j], params["v"][z], 0.01))


def test_full_threshold_zeroes_contexts():
    params, rng = random_model(5)
    r = random_record(rng, 4, 6)
    tr = forward(r, params, AttentionConfig(1.0))
    assert not tr.alpha.any() and not tr.contexts.any()
    # with no context every dimension shares the same synergic vector
    Hy = params.arch.H_series
    s = 1 / (1 + np.exp(-(tr.h_series @ params["W_f"][:, :Hy].T + params["b_f"])))
    assert np.allclose(tr.synergic, s[:, None, :])
    assert np.allclose(tr.probs, 0.25)
    assert np.allclose(tr.gap_raw, s @ params["w_s"] + params["b_s"])


def test_event_only_variant_equals_zero_series_state():
    params, rng = random_model(6)
    r = random_record(rng, 4, 7)
    no_series = Record(r.id, r.sequence, None)
    tr_full = forward(no_series, params)
    assert not tr_full.h_series.any()
    arch = Architecture(Z=4, F=2, E=3, H_event=6, H_series=6, H_syn=6, use_series=False)
    event_only = ModelParams(arch, {k: v for k, v in params.tensors.items() if not k.startswith("series.")})
    assert arch.variant == "AERPP"
    tr_eo = forward(r, event_only)
    assert np.array_equal(tr_full.probs, tr_eo.probs)
    assert np.array_equal(tr_full.gap_raw, tr_eo.gap_raw)


def test_forward_deterministic():
    params, rng = random_model(7)
    r = random_record(rng, 4, 8)
    a, b = forward(r, params), forward(r, params)
    for name in ("probs", "alpha", "contexts", "synergic", "gap_raw", "h_event", "h_series"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_predict_next_agrees_with_forward():
    params, rng = random_model(8, scale=2.0)
    for _ in range(100):
        n = int(rng.integers(2, 10))
        r = random_record(rng, 4, n)
        tr = forward(r, params)
        k = int(rng.integers(1, n))  # prefix of k events predicts event k
        prefix = Record(r.id, r.sequence.prefix(k), r.series)
        pred = predict_next(prefix, params)
        # same math on a shorter input; BLAS may round differently
        assert np.allclose(pred.probs, tr.probs[k - 1], rtol=1e-12, atol=1e-15)
        assert pred.dim == int(np.argmax(pred.probs))
        assert math.isclose(pred.time, tr.pred_times[k - 1])
    with pytest.raises(ValueError):
        predict_next(rec([], [], 4), params)


def test_schema_mismatches_raise():
    params, rng = random_model(9)
    with pytest.raises(DataError):
        forward(rec([0, 1], [0.0, 1.0], 5), params)
    bad = Record("x", EventSequence.from_arrays([0, 1], [0.0, 1.0], 4), TimeSeries(0.0, 1.0, np.zeros((3, 3))))
    with pytest.raises(DataError, match="series width"):
        forward(bad, params)


# ---------------------------------------------------------------- loss

def fake_trace(probs, dims, times, gap_raw, time_scale=1.0):
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    J = probs.shape[0]
    return ForwardTrace(np.asarray(dims), np.asarray(times, dtype=float), None, None, None, None, None,
                        probs, probs.argmax(axis=1), np.asarray(gap_raw, dtype=float)[:J], time_scale,
                        0.01, None)


def test_perfect_prediction_loss():
    tr = fake_trace([[0.0, 1.0]], [0, 1], [0.0, 2.0], [2.0])
    assert math.isclose(sequence_loss(tr, [1.0, 1.0]), 0.5 * math.log(2 * math.pi))


def test_loss_terms_closed_form():
    tr = fake_trace([[0.2, 0.8], [0.6, 0.4]], [0, 1, 0], [0.0, 1.5, 2.0], [1.0, 1.0], time_scale=2.0)
    b = [2.0, 0.5]
    cfg = LossConfig(sigma=0.5, time_loss_weight=0.3)
    terms = loss_terms(tr, b, cfg)
    expected_class = -(0.5 * math.log(0.8) + 2.0 * math.log(0.6))
    gaps = np.array([0.75, 0.25])
    expected_time = 0.3 * sum(0.5 * math.log(2 * math.pi * 0.25) + (g - 1.0) ** 2 / 0.5 for g in gaps)
    assert math.isclose(terms["class"], expected_class)
    assert math.isclose(terms["time"], expected_time)
    assert terms["steps"] == 2
    assert math.isclose(loss_terms(tr, b, LossConfig(0.5, 0.0))["total"], expected_class)
    doubled = loss_terms(tr, [4.0, 0.5], cfg)["class"]
    assert math.isclose(doubled - terms["class"], -2.0 * math.log(0.6))


def test_zero_probability_is_clamped():
    tr = fake_trace([[1.0, 0.0]], [0, 1], [0.0, 1.0], [1.0])
    terms = loss_terms(tr, [1.0, 1.0], LossConfig(time_loss_weight=0.0))
    assert terms["clamped"] == 1
    assert math.isclose(terms["class"], -math.log(1e-12))


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("seed,with_series", [(0, True), (1, False), (2, True)])
def test_gradients_match_finite_differences(seed, with_series):
    worst, n, _ = checked_instance(np.random.default_rng(seed), 4, 5, 6, with_series)
    assert n > 100
    assert worst < 1e-4


def test_gradient_checker_detects_a_wrong_gradient(monkeypatch):
    import atrpp.model as m
    real = m.gradients

    def off(*args):
        g = real(*args)
        g["v"] = g["v"] * 1.01
        return g

    monkeypatch.setattr("_gradcheck.gradients", off)
    inst = random_instance(np.random.default_rng(3), 4, 5, 6)
    worst, _, crossed = check(*inst)
    assert crossed or worst > 1e-3


def test_time_gradient_vanishes_at_exact_prediction():
    params, rng = random_model(10)
    r = rec([1, 2], [0.0, 0.0], 4)
    tr = forward(r, params)
    params.tensors["b_s"] = np.asarray(float(params["b_s"]) - float(tr.gap_raw[0]))  # gap_raw -> 0 = true gap
    tr = forward(r, params)
    assert abs(tr.gap_raw[0]) < 1e-12
    g = gradients(tr, np.ones(4), LossConfig(time_loss_weight=1.0), params)
    assert abs(float(g["b_s"])) < 1e-12 and np.abs(g["w_s"]).max() < 1e-12


def test_class_weight_gradient_is_linear():
    params, rng = random_model(11)
    r = random_record(rng, 4, 10)
    tr = forward(r, params)
    cfg = LossConfig(time_loss_weight=0.0)
    z = int(r.sequence.dims[1])
    b = np.array([0.7, 1.3, 0.9, 1.1])
    b2 = b.copy()
    b2[z] *= 2
    only_z = np.zeros(4)
    only_z[z] = b[z]
    g1, g2, gz = (gradients(tr, w, cfg, params) for w in (b, b2, only_z))
    for k in g1:
        assert np.allclose(g2[k] - g1[k], gz[k], rtol=1e-10, atol=1e-14)


def test_embedding_gradient_confined_to_used_columns():
    params, rng = random_model(12)
    r = rec([2, 2, 2, 2], [0.0, 0.5, 1.7, 2.0], 4, random_record(rng, 4, 4).series)
    g = gradients(forward(r, params), np.ones(4), LossConfig(), params)["W_em"]
    assert np.abs(g[:, 2]).max() > 0
    assert not np.delete(g, 2, axis=1).any()


# ---------------------------------------------------------------- infectivity

def test_infectivity_single_history_event():
    params, rng = random_model(13)
    r = rec([1, 3], [0.0, 1.0], 4)
    est = extract_infectivity(params, AttentionConfig(0.0), [r])
    tr = forward(r, params, AttentionConfig(0.0))
    assert np.allclose(est.matrix[1], tr.alpha[0])
    assert not np.delete(est.matrix, 1, axis=0).any()
    assert est.counts[1].tolist() == [1, 1, 1, 1]


def test_infectivity_is_a_pooled_mean():
    params, _ = random_model(14)
    att = AttentionConfig(0.0)
    r1, r2 = rec([0, 1], [0.0, 1.0], 4, rid="a"), rec([0, 3, 2], [0.0, 0.3, 0.9], 4, rid="b")
    a1 = forward(r1, params, att).alpha[0]
    a2 = forward(r2, params, att).alpha[0]
    est = extract_infectivity(params, att, [r1, r2])
    # r2's first event is attended at both of its steps
    assert np.allclose(est.matrix[0], (a1 + 2 * a2) / 3)
    assert np.allclose(extract_infectivity(params, AttentionConfig(1.0), [r1, r2]).matrix, 0)
    with pytest.raises(ValueError):
        extract_infectivity(params, att, [])


def test_infectivity_respects_window():
    params, _ = random_model(15)
    att = AttentionConfig(0.0, window=1)
    r = rec([0, 1, 2, 3], [0.0, 1.0, 2.0, 3.0], 4)
    tr = forward(r, params, att)
    est = extract_infectivity(params, att, [r])
    for i in range(3):
        assert np.allclose(est.matrix[tr.dims[i]], tr.alpha[i])


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    params, _ = random_model(16)
    params.time_scale = 2.5
    params.series_mean = np.array([0.1, -0.2])
    att = AttentionConfig(0.05, 7)
    save_checkpoint(tmp_path / "ck.json", params, att, {"epochs_completed": 3})
    back, att2, extra = load_checkpoint(tmp_path / "ck.json")
    assert att2 == att and extra == {"epochs_completed": 3}
    assert back.arch == params.arch and back.time_scale == 2.5
    assert np.array_equal(back.series_mean, params.series_mean)
    for k, v in params.tensors.items():
        assert np.array_equal(back[k], v)


def test_checkpoint_rejects_foreign_files(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "something-else"}')
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "x.json")


def test_parameter_count():
    arch = Architecture(Z=10, F=10)
    params = init_params(arch, np.random.default_rng(0))
    lstm_count = lambda D, H: 4 * H * D + 4 * H * H + 3 * H + 4 * H
    expected = 16 * 10 + lstm_count(17, 32) + lstm_count(10, 32) + 10 * 32 + 32 * 64 + 32 * 3 + 1
    assert params.num_parameters == expected
