import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from amprotocol.phantom import ProcessParams
from amprotocol.predictor import (
    DegenerateRange,
    DivergenceError,
    Ensemble,
    MLPModel,
    MLPTrainConfig,
    ModelNotReady,
    SampleRow,
    UndefinedCorrelation,
    correlation_r,
    denormalize,
    fit_ranges,
    forward,
    forward_scaled,
    init_model,
    load_model,
    loss_and_grad,
    mse,
    normalize,
    read_table,
    save_model,
    split,
    train,
    train_ensemble,
    write_table,
)

from oracles import synthetic_table


def test_normalize_endpoints_and_midpoint():
    scaled, lo, hi = normalize([50.0, 60.0, 70.0])
    np.testing.assert_array_equal(scaled, [-1.0, 0.0, 1.0])
    assert (lo, hi) == (50.0, 70.0)


def test_normalize_constant_column():
    with pytest.raises(DegenerateRange):
        normalize([100.0, 100.0])
    with pytest.warns(UserWarning):
        scaled, _, _ = normalize([[1.0, 100.0], [2.0, 100.0]], allow_constant=True)
    np.testing.assert_array_equal(scaled[:, 1], 0.0)


@settings(max_examples=100)
@given(x=hnp.arrays(np.float64, st.integers(2, 20), elements=st.floats(-1e3, 1e3)).filter(lambda v: np.ptp(v) > 1e-3))
def test_denormalize_inverts_normalize(x):
    scaled, lo, hi = normalize(x)
    np.testing.assert_allclose(denormalize(scaled, lo, hi), x, rtol=0, atol=1e-12 * max(1.0, np.abs(x).max()))


def _zero_model(hidden=4):
    return MLPModel(np.zeros((4, hidden)), np.zeros(hidden), np.zeros(hidden), 0.0)


def _ranged(model, out=(1.0, 3.0)):
    return MLPModel(
        model.w_hidden, model.b_hidden, model.w_out, model.b_out,
        np.array([50.0, 30.0, 100.0, 11.0]), np.array([70.0, 35.0, 100.0, 31.0]), *out,
    )


def test_zero_network_predicts_range_midpoint():
    assert forward(_ranged(_zero_model()), ProcessParams(55, 30, 100, 21)) == pytest.approx(2.0, abs=1e-15)


def test_single_path_matches_hand_evaluation():
    m = _zero_model()
    m.w_hidden[0, 0] = 1.0
    m.w_out[0] = 1.0
    model = _ranged(m, (1.0, 3.0))
    x1 = 2 * (65 - 50) / 20 - 1  # 0.5
    h1 = 1 / (1 + math.exp(-x1))
    other = 0.0  # hidden units 2-4 sit at 0.5 but carry zero output weight
    y = math.tanh(h1 + other)
    expected = (y + 1) * (3.0 - 1.0) / 2 + 1.0
    assert forward(model, ProcessParams(65, 30, 100, 21)) == pytest.approx(expected, abs=1e-14)


def test_untrained_model_not_ready():
    with pytest.raises(ModelNotReady):
        forward(init_model(), ProcessParams(60, 30))


def test_extrapolation_warns():
    model = _ranged(_zero_model())
    with pytest.warns(UserWarning):
        forward(model, np.array([[90.0, 30.0, 100.0, 21.0]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        forward(model, np.array([[71.0, 30.0, 100.0, 21.0]]))


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.1, 10), b=st.floats(-100, 100), seed=st.integers(0, 1000))
def test_forward_invariant_to_affine_input_rescaling(a, b, seed):
    rows = synthetic_table()
    model = fit_ranges(init_model(seed=seed), rows)
    x = np.array([r.params.as_tuple() for r in rows])
    rescaled = MLPModel(
        model.w_hidden, model.b_hidden, model.w_out, model.b_out,
        a * model.input_lo + b, a * model.input_hi + b, model.output_lo, model.output_hi,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        np.testing.assert_allclose(forward(rescaled, a * x + b), forward(model, x), rtol=1e-12, atol=1e-12)


def test_mse_cases():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([1, 1], [0, 0]) == 1.0
    assert mse([2, 2, 2], [1, 2, 3]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        mse([1, 2], [1])


def test_correlation_cases():
    x = np.array([0.0, 1.0, 4.0, 9.0])
    assert correlation_r(2 * x + 1, x) == pytest.approx(1.0)
    assert correlation_r(-x, x) == pytest.approx(-1.0)
    assert correlation_r([2, 1, 3], [1, 2, 3]) == pytest.approx(0.5)
    with pytest.raises(UndefinedCorrelation):
        correlation_r([1, 1, 1], [1, 2, 3])


def test_split_counts():
    rows = list(range(20))
    tr, va, te = split(rows, seed=4)
    assert (len(tr), len(va), len(te)) == (14, 3, 3)
    assert sorted(tr + va + te) == rows
    assert [len(s) for s in split([1, 2, 3])] == [1, 1, 1]
    assert split(rows, seed=4) == (tr, va, te)


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        split(list(range(10)), (0.5, 0.2, 0.2))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    xs = rng.uniform(-1, 1, (14, 4))
    ys = rng.uniform(-0.9, 0.9, 14)
    model = init_model(seed=1)
    model = model.with_vector(rng.normal(0, 1, model.vector().size))
    _, grad = loss_and_grad(model, xs, ys)
    theta = model.vector()
    eps = 1e-6
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        num = (loss_and_grad(model.with_vector(tp), xs, ys)[0] - loss_and_grad(model.with_vector(tm), xs, ys)[0]) / (2 * eps)
        assert abs(num - grad[i]) <= 1e-6 * max(abs(num), abs(grad[i]), 1e-8)


def test_plain_descent_never_increases_loss():
    rows = [SampleRow(ProcessParams(h, s, 100, p), 0.02 * h + 0.01 * p) for h in (50, 55, 60, 65, 70) for s in (30, 35) for p in (11, 31)]
    cfg = MLPTrainConfig(learning_rate=1e-3, momentum=0.0, lr_increase=1.0 + 1e-12, lr_decrease=0.5, max_perf_increase=1.0, epochs=300)
    hist = train(rows, cfg).history
    assert all(b <= a for a, b in zip(hist.train_mse, hist.train_mse[1:]))


def test_accepted_steps_respect_performance_ratio():
    hist = train(synthetic_table(), MLPTrainConfig(epochs=2000)).history
    assert all(b <= a * 1.04 for a, b in zip(hist.train_mse, hist.train_mse[1:]))
    assert len(hist.lr) == len(hist.val_mse) == 2000


def test_training_is_deterministic():
    a = train(synthetic_table(), MLPTrainConfig(epochs=300, seed=3))
    b = train(synthetic_table(), MLPTrainConfig(epochs=300, seed=3))
    assert a.model.vector().tobytes() == b.model.vector().tobytes()
    assert a.history.train_mse == b.history.train_mse


def test_overfits_synthetic_table():
    res = train(synthetic_table(), MLPTrainConfig(epochs=5000, seed=0))
    assert res.history.train_mse[-1] < 1e-3
    pred = forward(res.model, [r.params for r in res.train])
    assert correlation_r(pred, [r.porosity for r in res.train]) >= 0.99


def test_divergence_reports_epoch():
    rows = synthetic_table()
    with np.errstate(all="ignore"):
        model = init_model().with_vector(np.full(init_model().vector().size, np.nan))
        with pytest.raises(DivergenceError) as err:
            train(rows, MLPTrainConfig(epochs=5), model=model)
    assert err.value.epoch == 1


def test_restore_best_returns_best_validation_model():
    rows = synthetic_table()
    res = train(rows, MLPTrainConfig(epochs=400, seed=1), restore_best=True)
    assert 1 <= res.history.best_epoch <= 400
    assert res.history.best_val == min(res.history.val_mse)


def test_model_file_round_trip(tmp_path):
    res = train(synthetic_table(), MLPTrainConfig(epochs=200))
    save_model(res.model, tmp_path / "m.mlp")
    assert (tmp_path / "m.mlp").read_text().startswith("MLP441\n")
    back = load_model(tmp_path / "m.mlp")
    params = [r.params for r in synthetic_table()]
    assert forward(back, params).tobytes() == forward(res.model, params).tobytes()


def test_table_round_trip(tmp_path):
    rows = synthetic_table()
    write_table(rows, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "layer_height_um,nozzle_speed_mm_s,infill_pct,printer,porosity_pct"
    assert read_table(tmp_path / "t.csv") == rows


def test_history_csv(tmp_path):
    hist = train(synthetic_table(), MLPTrainConfig(epochs=3)).history
    hist.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_mse,val_mse,lr" and len(lines) == 4


def test_ensemble_averages_members():
    rows = synthetic_table()
    ens, results = train_ensemble(rows, MLPTrainConfig(epochs=50), restarts=3)
    assert len(ens) == 3
    assert all(r.train == results[0].train for r in results)
    params = [r.params for r in rows]
    expected = np.mean([forward(m, params) for m in ens.models], axis=0)
    np.testing.assert_allclose(ens(params), expected, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        Ensemble(())


def test_sample_row_rejects_bad_porosity():
    with pytest.raises(ValueError):
        SampleRow(ProcessParams(60, 30), 101.0)
