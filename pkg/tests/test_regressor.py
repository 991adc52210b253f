import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lidar_intensity.errors import (
    ContractError,
    FileFormatError,
    InsufficientDataError,
    ModelCorruptError,
    TrainingDivergedError,
)
from lidar_intensity.regressor import (
    HALF_PI,
    IncidenceAngleRegressor,
    MlpModel,
    TrainConfig,
    backward,
    forward,
    load_model,
    mae_loss,
    save_model,
    split_train_validation,
    train,
)

from oracles import central_difference, mae_loop, mlp_loss_loop


def unit_rows(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def analytic_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    normals, beams = unit_rows(rng, n), unit_rows(rng, n)
    # sensor-facing, as the normal estimator returns them
    normals *= -np.sign(np.sum(normals * beams, axis=1, keepdims=True))
    y = np.arccos(np.abs(np.sum(normals * beams, axis=1)))
    return np.hstack([normals, beams]), y


def flat_grad(gw, gb):
    return np.concatenate([a.ravel() for pair in zip(gw, gb) for a in pair])


def test_zero_model_outputs_quarter_pi():
    X, _ = analytic_dataset(20)
    np.testing.assert_allclose(forward(MlpModel.zeros(), X), np.pi / 4)


@given(st.integers(0, 2**31), st.floats(0.1, 50.0))
def test_output_range(seed, scale):
    m = MlpModel.init(seed=seed)
    m.set_flat(m.flat() * scale)
    X = np.random.default_rng(seed).normal(0, 10, (50, 6))
    out = forward(m, X)
    assert np.all((out >= 0) & (out <= HALF_PI))


def test_nan_parameters_rejected():
    m = MlpModel.init()
    m.biases[0][3] = np.nan
    with pytest.raises(ModelCorruptError):
        forward(m, np.zeros((1, 6)))


def test_forward_matches_loop_oracle():
    m = MlpModel.init((6, 5, 4, 1), seed=3)
    X, y = analytic_dataset(12, seed=1)
    expected = mlp_loss_loop(
        [w.tolist() for w in m.weights], [b.tolist() for b in m.biases], X.tolist(), y.tolist()
    )
    assert mae_loss(forward(m, X), y) == pytest.approx(expected, rel=1e-12)


def test_mae_examples():
    assert mae_loss([0.3, 0.4], [0.3, 0.4]) == 0.0
    assert mae_loss([0, HALF_PI], [HALF_PI, 0]) == pytest.approx(HALF_PI)
    rng = np.random.default_rng(8)
    p, t = rng.uniform(0, 2, 100), rng.uniform(0, 2, 100)
    assert mae_loss(p, t) == pytest.approx(mae_loop(p.tolist(), t.tolist()), rel=1e-12, abs=0)


def test_mae_contract():
    with pytest.raises(ContractError):
        mae_loss([], [])
    with pytest.raises(ContractError):
        mae_loss([1, 2], [1])


def _loss_at(model, X, y):
    def f(theta):
        probe = model.copy()
        probe.set_flat(theta)
        return mae_loss(forward(probe, X), y)

    return f


def gradient_check(seed, n_batches=5, n_coords=20, batch=8, h=1e-6):
    """Largest relative discrepancy between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for b in range(n_batches):
        model = MlpModel.init(seed=seed * 10 + b)
        X, y = analytic_dataset(batch, seed=seed * 10 + b)
        _, gw, gb = backward(model, X, y)
        g = flat_grad(gw, gb)
        theta = model.flat()
        f = _loss_at(model, X, y)
        for k in rng.choice(theta.size, n_coords, replace=False):
            num = central_difference(f, theta, k, h)
            scale = max(abs(g[k]), abs(num), 1e-7)
            worst = max(worst, abs(g[k] - num) / scale)
    return worst


def test_gradient_check():
    assert gradient_check(seed=1) < 1e-4


def test_gradient_single_example_every_parameter():
    model = MlpModel.init((6, 8, 8, 1), seed=5)
    X, y = analytic_dataset(1, seed=5)
    _, gw, gb = backward(model, X, y)
    g = flat_grad(gw, gb)
    f = _loss_at(model, X, y)
    theta = model.flat()
    num = np.array([central_difference(f, theta, k, 1e-6) for k in range(theta.size)])
    scale = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-7)
    assert np.max(np.abs(g - num) / scale) < 1e-4


def test_gradient_zero_at_exact_fit():
    model = MlpModel.init(seed=2)
    X, _ = analytic_dataset(4, seed=2)
    y = forward(model, X)
    loss, gw, gb = backward(model, X, y)
    assert loss == 0.0
    assert not flat_grad(gw, gb).any()


def test_batch_gradient_is_mean_of_examples():
    model = MlpModel.init(seed=4)
    X, y = analytic_dataset(6, seed=4)
    _, gw, gb = backward(model, X, y)
    per = [flat_grad(*backward(model, X[i:i + 1], y[i:i + 1])[1:]) for i in range(6)]
    np.testing.assert_allclose(flat_grad(gw, gb), np.mean(per, axis=0), rtol=1e-10, atol=1e-15)


def test_train_deterministic():
    X, y = analytic_dataset(300, seed=7)
    cfg = TrainConfig(epochs=3, seed=11)
    a, b = train(X, y, cfg), train(X, y, cfg)
    assert a.train_loss == b.train_loss
    np.testing.assert_array_equal(a.model.flat(), b.model.flat())


def test_train_constant_target():
    X, _ = analytic_dataset(500, seed=3)
    result = train(X, np.full(500, 0.3), TrainConfig(epochs=20))
    assert result.final_val_mae < 0.01


def test_train_preconditions():
    X, y = analytic_dataset(99)
    with pytest.raises(InsufficientDataError):
        train(X, y)
    X, y = analytic_dataset(120)
    y[0] = 2.0
    with pytest.raises(ContractError):
        train(X, y)


def test_train_divergence_reports_epoch(monkeypatch):
    import lidar_intensity.regressor as reg

    X, y = analytic_dataset(200)
    real_backward = reg.backward
    calls = []

    def poisoned(model, Xb, yb):
        calls.append(1)
        loss, gw, gb = real_backward(model, Xb, yb)
        if len(calls) > 12:  # second epoch: 180 train rows / 16 = 12 batches
            gw = [np.full_like(g, np.nan) for g in gw]
        return loss, gw, gb

    monkeypatch.setattr(reg, "backward", poisoned)
    with pytest.raises(TrainingDivergedError) as info:
        train(X, y, TrainConfig(epochs=3))
    assert info.value.epoch == 1


def test_non_finite_features_rejected():
    X, _ = analytic_dataset(3)
    X[1, 2] = np.inf
    with pytest.raises(ContractError):
        forward(MlpModel.init(), X)


def test_trained_model_near_thirty_degrees():
    X, y = analytic_dataset(10_000, seed=0)
    result = train(X, y, TrainConfig(epochs=60))
    rng = np.random.default_rng(99)
    beams = unit_rows(rng, 200)
    tangent = unit_rows(rng, 200)
    tangent -= np.sum(tangent * beams, axis=1, keepdims=True) * beams
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    a = np.radians(30)
    normals = -np.cos(a) * beams + np.sin(a) * tangent
    pred = forward(result.model, np.hstack([normals, beams]))
    assert np.degrees(np.median(np.abs(pred - a))) < 3.0


def test_model_round_trip(tmp_path):
    m = MlpModel.init(seed=12)
    save_model(m, tmp_path / "m.txt", {"note": "x"})
    back = load_model(tmp_path / "m.txt")
    np.testing.assert_array_equal(back.flat(), m.flat())
    assert back.dims == m.dims and back.seed == 12 and back.activation == "tanh"
    X, _ = analytic_dataset(10)
    np.testing.assert_array_equal(forward(back, X), forward(m, X))


def test_model_dims_mismatch(tmp_path):
    m = MlpModel.init((6, 64, 1))
    save_model(m, tmp_path / "m.txt")
    text = (tmp_path / "m.txt").read_text().replace("dims 6 64 1", "dims 6 32 1")
    (tmp_path / "m.txt").write_text(text)
    with pytest.raises(FileFormatError, match="dims"):
        load_model(tmp_path / "m.txt")


def test_sklearn_wrapper():
    X, y = analytic_dataset(400, seed=1)
    est = IncidenceAngleRegressor(epochs=5, hidden=(16, 16)).fit(X, y)
    assert est.predict(X).shape == (400,)
    assert est.score(X, y) <= 0
    assert est.get_params()["hidden"] == (16, 16)
    again = IncidenceAngleRegressor.from_model(est.model_)
    np.testing.assert_array_equal(again.predict(X), est.predict(X))


def test_regressor_beats_pca_on_noisy_normals():
    # At 25 deg normal noise the arccos of the noisy normal is strongly biased
    # and the regressor learns to correct it.
    n = 10_000
    X, y = analytic_dataset(n, seed=21)
    rng = np.random.default_rng(2021)
    noisy = X[:, :3] + rng.normal(0, np.radians(25), (n, 3))
    noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
    Xn = np.hstack([noisy, X[:, 3:]])
    result = train(Xn, y, TrainConfig(epochs=100))
    _, val = split_train_validation(n, 0.1, 0)
    pca = np.arccos(np.abs(np.sum(noisy[val] * X[val, 3:], axis=1)))
    assert result.final_val_mae < mae_loss(pca, y[val])
