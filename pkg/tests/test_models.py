import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import check_graph_grads
from fairdemand.diffcore import Graph
from fairdemand.graph import binary_adjacency, propagation_matrix
from fairdemand.models import (
    DEFAULT_HIDDEN,
    MODEL_KINDS,
    ModelConfig,
    ModelError,
    arima_fit,
    arima_forecast,
    create_model,
    gru_forward,
    ha_forecast,
    load_model,
    mlp_forward,
    mlr_forward,
    tgcn_forward,
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def ring(n):
    return propagation_matrix(binary_adjacency([(i, (i + 1) % n) for i in range(n)], n))


def make(kind, rng, K=5, M=1, hidden=4, N=4, **kw):
    prop = ring(N) if kind == "tgcn" else None
    model = create_model(ModelConfig(kind, K=K, M=M, hidden=hidden, **kw), prop)
    model.init_params(rng)
    # nonzero biases so every gradient path is exercised
    model.set_params({k: v + 0.1 * rng.standard_normal(v.shape) for k, v in model.params.items()})
    return model


def loss_graph(model, X, weights):
    """Scalar loss sum(pred * weights): a generic linear read-out of the forecasts."""
    g = Graph()
    Xv, pvars, extras, pred = model.build(g)
    g.set_output((pred * weights).sum())
    return g, {"X": X, **model.param_bindings()}


# -- HA ---------------------------------------------------------------------

def test_ha_examples(rng):
    assert ha_forecast(np.array([[2.0, 4.0, 6.0]]))[0, 0] == 4.0
    np.testing.assert_array_equal(ha_forecast(np.full((3, 7), 2.5), M=3), np.full((3, 3), 2.5))
    X = rng.standard_normal((5, 12))
    out = ha_forecast(X, M=2)
    for i in range(5):
        assert abs(out[i, 0] - sum(X[i]) / 12) < 1e-12
        assert out[i, 0] == out[i, 1]


def test_ha_model_matches_function(rng):
    X = rng.standard_normal((2, 5, 12))
    model = create_model(ModelConfig("ha", M=2))
    g = Graph()
    _, _, _, pred = model.build(g)
    g.forward({"X": X})
    np.testing.assert_allclose(g.value(pred), ha_forecast(X, 2), rtol=0, atol=1e-14)


# -- MLR --------------------------------------------------------------------

def test_mlr_examples(rng):
    X = rng.standard_normal((6, 4))
    B = np.zeros((4, 1))
    B[-1, 0] = 1.0
    np.testing.assert_array_equal(mlr_forward(X, {"B": B, "b": np.zeros(1)})[:, 0], X[:, -1])
    np.testing.assert_array_equal(mlr_forward(X, {"B": np.zeros((4, 1)), "b": np.array([7.0])}), np.full((6, 1), 7.0))
    with pytest.raises(ModelError):
        mlr_forward(X, {"B": np.zeros((3, 1)), "b": np.zeros(1)})


def test_mlr_mse_gradient(rng):
    model = make("mlr", rng, K=6, M=2)
    X = rng.standard_normal((3, 5, 6))
    Y = rng.standard_normal((3, 5, 2))
    g = Graph()
    _, _, _, pred = model.build(g)
    diff = pred - Y
    g.set_output((diff * diff).mean())
    check_graph_grads(g, {"X": X, **model.param_bindings()}, ["param:B", "param:b"], tol=1e-5)


# -- ARIMA ------------------------------------------------------------------

def test_arima_random_walk(rng):
    series = np.cumsum(rng.standard_normal((3, 300)), axis=1)
    model = arima_fit(series, 0, 1, 0, K=12)
    X = rng.standard_normal((4, 3, 12))
    np.testing.assert_array_equal(arima_forecast(model, X)[..., 0], X[..., -1])


def test_arima_ar1_recovery():
    rng = np.random.default_rng(7)
    n, phi = 2000, 0.8
    x = np.zeros(n)
    eps = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + eps[t]
    model = arima_fit(x, 1, 0, 0, K=4)
    assert abs(model.params["phi"][0, 0] - phi) < 0.05
    # one-step forecast is const + phi * last value
    X = rng.standard_normal((1, 4))
    pred = arima_forecast(model, X)[0, 0]
    assert abs(pred - (model.params["const"][0] + model.params["phi"][0, 0] * X[0, -1])) < 1e-12


def test_arima_white_noise_forecasts_mean(rng):
    series = 5.0 + rng.standard_normal((2, 400))
    model = arima_fit(series, 0, 0, 0, K=6)
    out = arima_forecast(model, rng.standard_normal((2, 6)))
    np.testing.assert_allclose(out[:, 0], series.mean(axis=1), rtol=0, atol=1e-10)


def test_arima_arma_runs_and_multistep(rng):
    x = np.zeros(600)
    e = rng.standard_normal(600)
    for t in range(1, 600):
        x[t] = 0.5 * x[t - 1] + e[t] + 0.3 * e[t - 1]
    model = arima_fit(x, 1, 0, 1, K=12, M=3)
    out = arima_forecast(model, x[None, -12:])
    assert out.shape == (1, 3) and np.all(np.isfinite(out))
    assert abs(model.params["phi"][0, 0] - 0.5) < 0.15


def test_arima_rejects_short_series():
    with pytest.raises(ModelError):
        arima_fit(np.arange(15.0), 1, 1, 1, K=12)


def test_arima_explosive_falls_back(caplog):
    series = 1.05 ** np.arange(200.0)
    model = arima_fit(series, 1, 0, 0, K=4)
    assert model.fallback[0] == 1.0 and "explosive" in caplog.text
    X = np.array([[1.0, 2.0, 3.0, 9.0]])
    assert arima_forecast(model, X)[0, 0] == 9.0


# -- MLP --------------------------------------------------------------------

def test_mlp_defaults_and_param_count():
    cfg = ModelConfig("mlp")
    assert cfg.hidden_size == 300 and cfg.dropout == 0.01 and cfg.activation == "relu"
    # K*H + H + H*M + M
    assert create_model(cfg).param_count() == 12 * 300 + 300 + 300 * 1 + 1 == 4201


@pytest.mark.parametrize("kind,K,M,H,expect", [
    ("mlr", 12, 1, None, 13),
    ("mlr", 6, 3, None, 21),
    ("mlp", 6, 2, 8, 6 * 8 + 8 + 8 * 2 + 2),
    ("gru", 12, 1, 4, 3 * (1 * 4 + 4 * 4 + 4) + 4 + 1),
    ("tgcn", 12, 1, 4, 1 + 3 * (1 * 4 + 4 * 4 + 4) + 4 + 1),
    ("ha", 12, 1, None, 0),
])
def test_param_count_formula(kind, K, M, H, expect):
    model = create_model(ModelConfig(kind, K=K, M=M, hidden=H), ring(3) if kind == "tgcn" else None)
    assert model.param_count() == expect


def test_mlp_examples(rng):
    params = {"W1": np.zeros((6, 8)), "b1": np.zeros(8), "W2": np.zeros((8, 1)), "b2": np.array([3.5])}
    np.testing.assert_array_equal(mlp_forward(rng.standard_normal((4, 6)), params), np.full((4, 1), 3.5))
    model = make("mlp", rng, K=6, hidden=8)
    X = rng.standard_normal((4, 6))
    a, b = model.predict(X), model.predict(X)
    np.testing.assert_array_equal(a, b)


def test_mlp_matches_numpy_oracle(rng):
    model = make("mlp", rng, K=6, hidden=8, M=2)
    p = model.params
    X = rng.standard_normal((3, 4, 6))
    expect = np.maximum(X @ p["W1"] + p["b1"], 0.0) @ p["W2"] + p["b2"]
    np.testing.assert_allclose(model.predict(X), expect, rtol=1e-13, atol=1e-13)
    mask = (rng.random((3, 4, 8)) >= 0.5) / 0.5
    out = mlp_forward(X, p, train_mode=True, dropout_mask=mask)
    expect = (np.maximum(X @ p["W1"] + p["b1"], 0.0) * mask) @ p["W2"] + p["b2"]
    np.testing.assert_allclose(out, expect, rtol=1e-13, atol=1e-13)


def test_mlp_linear_activation_is_affine(rng):
    model = make("mlp", rng, K=5, hidden=6, activation="linear")
    X1, X2 = rng.standard_normal((2, 3, 5))
    f = model.predict
    np.testing.assert_allclose(f(0.3 * X1 + 0.7 * X2), 0.3 * f(X1) + 0.7 * f(X2), atol=1e-12)


def test_mlp_dropout_mask_is_seeded(rng):
    model = make("mlp", rng, K=6, hidden=8)
    a = model.extra_bindings((2, 4), np.random.default_rng(3))["dropout_mask"]
    b = model.extra_bindings((2, 4), np.random.default_rng(3))["dropout_mask"]
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.99}


# -- GRU / T-GCN ------------------------------------------------------------

def test_gru_zero_input_zero_output(rng):
    model = create_model(ModelConfig("gru", K=5, hidden=4))
    model.init_params(rng)
    params = dict(model.params)
    params.update({k: np.zeros_like(v) for k, v in params.items() if k.startswith("b")})
    assert np.all(gru_forward(np.zeros((3, 5)), params) == 0.0)


def gru_cell_oracle(x, h, p):
    z = sigmoid(x * p["W_z"][0] + h @ p["U_z"] + p["b_z"])
    r = sigmoid(x * p["W_r"][0] + h @ p["U_r"] + p["b_r"])
    n = np.tanh(x * p["W_n"][0] + (r * h) @ p["U_n"] + p["b_n"])
    return (1 - z) * h + z * n


def test_gru_hand_computed_two_units():
    p = {
        "W_z": np.array([[0.5, -0.3]]), "U_z": np.array([[0.1, 0.2], [-0.2, 0.4]]), "b_z": np.array([0.1, -0.1]),
        "W_r": np.array([[0.2, 0.7]]), "U_r": np.array([[0.3, -0.1], [0.0, 0.2]]), "b_r": np.array([0.0, 0.05]),
        "W_n": np.array([[-0.4, 0.6]]), "U_n": np.array([[0.5, 0.1], [0.2, -0.3]]), "b_n": np.array([0.2, 0.0]),
        "W_out": np.array([[1.5], [-2.0]]), "b_out": np.array([0.25]),
    }
    x = 0.8
    # K=1 by hand: h0 = 0 so h1 = z * n
    z = np.array([sigmoid(0.5 * x + 0.1), sigmoid(-0.3 * x - 0.1)])
    n = np.array([np.tanh(-0.4 * x + 0.2), np.tanh(0.6 * x)])
    h1 = z * n
    out = gru_forward(np.array([[x]]), p)
    assert abs(out[0, 0] - (1.5 * h1[0] - 2.0 * h1[1] + 0.25)) < 1e-14
    # K=3 against the cell oracle applied step by step
    xs = np.array([0.8, -1.1, 0.4])
    h = np.zeros(2)
    for v in xs:
        h = gru_cell_oracle(v, h, p)
    assert abs(gru_forward(xs[None], p)[0, 0] - (h @ p["W_out"][:, 0] + 0.25)) < 1e-14


def test_gru_multistep_feeds_back(rng):
    model = make("gru", rng, K=4, M=3, hidden=3)
    X = rng.standard_normal((2, 4))
    out = model.predict(X)
    p = model.params
    for i in range(2):
        h = np.zeros(3)
        for v in X[i]:
            h = gru_cell_oracle(v, h, p)
        preds = []
        for _ in range(3):
            y = h @ p["W_out"][:, 0] + p["b_out"][0]
            preds.append(y)
            h = gru_cell_oracle(y, h, p)
        np.testing.assert_allclose(out[i], preds, rtol=1e-13, atol=1e-13)


def test_tgcn_identity_graph_equals_gru(rng):
    gru = make("gru", rng, K=5, hidden=4)
    X = rng.standard_normal((2, 6, 5))
    params = {"Theta": np.ones((1, 1)), **gru.params}
    np.testing.assert_allclose(tgcn_forward(X, params, np.eye(6)), gru.predict(X), rtol=0, atol=1e-15)


def test_tgcn_symmetric_nodes_and_node_checks(rng):
    model = make("tgcn", rng, K=5, hidden=4, N=2)
    x = rng.standard_normal(5)
    out = model.predict(np.stack([x, x]))
    assert out[0, 0] == out[1, 0]
    with pytest.raises(ModelError):
        tgcn_forward(rng.standard_normal((3, 5)), model.params, ring(4))
    named = create_model(ModelConfig("tgcn", K=5, hidden=4), ring(2), node_ids=["a", "b"])
    with pytest.raises(ModelError):
        named.check_nodes(["b", "a"])
    with pytest.raises(ModelError):
        create_model(ModelConfig("tgcn"))


GRAD_CASES = [
    ("mlr", dict(K=6, M=2)),
    ("mlp", dict(K=6, hidden=8)),
    ("gru", dict(K=5, hidden=4)),
    ("gru", dict(K=3, hidden=3, M=2)),
    ("tgcn", dict(K=5, hidden=4, gc_dim=2)),
]


@pytest.mark.parametrize("kind,kw", GRAD_CASES)
def test_gradients_match_finite_differences(kind, kw, rng):
    model = make(kind, rng, N=4, **kw)
    X = rng.standard_normal((2, 4, kw["K"]))
    weights = rng.standard_normal((2, 4, kw.get("M", 1)))
    g, bindings = loss_graph(model, X, weights)
    check_graph_grads(g, bindings, list(model.param_bindings()) + ["X"], h=1e-6, tol=1e-4)


@pytest.mark.parametrize("kind", ["ha", "mlr", "mlp", "gru", "tgcn"])
def test_permutation_equivariance(kind, rng):
    N = 5
    adj = binary_adjacency([(0, 1), (1, 2), (3, 4), (0, 4)], N)
    perm = rng.permutation(N)
    cfg = ModelConfig(kind, K=4, hidden=3)
    model = create_model(cfg, propagation_matrix(adj) if kind == "tgcn" else None)
    model.init_params(rng)
    X = rng.standard_normal((2, N, 4))
    out = model.predict(X)
    if kind == "tgcn":
        moved = create_model(cfg, propagation_matrix(adj[np.ix_(perm, perm)]))
        moved.set_params(model.params)
    else:
        moved = model
    np.testing.assert_allclose(moved.predict(X[:, perm]), out[:, perm], rtol=1e-13, atol=1e-14)


def test_permutation_equivariance_arima(rng):
    series = np.cumsum(rng.standard_normal((4, 200)), axis=1)
    perm = np.array([2, 0, 3, 1])
    a = arima_fit(series, 1, 1, 0, K=6)
    b = arima_fit(series[perm], 1, 1, 0, K=6)
    X = series[:, -6:]
    np.testing.assert_allclose(arima_forecast(b, X[perm]), arima_forecast(a, X)[perm], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_checkpoint_round_trip(kind, rng, tmp_path):
    if kind == "arima":
        model = arima_fit(np.cumsum(rng.standard_normal((3, 200)), axis=1), 1, 1, 1, K=6)
    else:
        model = create_model(ModelConfig(kind, K=6, hidden=3), ring(3) if kind == "tgcn" else None)
        model.init_params(rng)
    path = tmp_path / "model.json"
    model.save(path)
    state = json.loads(path.read_text())
    assert state["kind"] == kind and state["config"]["K"] == 6
    loaded = load_model(path)
    X = rng.standard_normal((2, 3, 6))
    np.testing.assert_array_equal(loaded.predict(X), model.predict(X))
    for k, v in model.params.items():
        np.testing.assert_array_equal(loaded.params[k], v)


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig("mlp", K=0)
    with pytest.raises(ModelError):
        ModelConfig("mlp", dropout=1.0)
    with pytest.raises(ModelError):
        ModelConfig("mlp", activation="tanh")
    with pytest.raises(ModelError):
        create_model(ModelConfig("stgcn"))
    assert DEFAULT_HIDDEN == {"mlp": 300, "gru": 64, "tgcn": 64}
    model = create_model(ModelConfig("mlp", K=4, hidden=2))
    with pytest.raises(ModelError):
        model.set_params({"W1": np.zeros((4, 2))})
    with pytest.raises(ModelError):
        model.predict(np.zeros((3, 5)))


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["mlr", "mlp", "gru", "tgcn"]), st.integers(0, 2**31))
def test_init_and_forward_deterministic(kind, seed):
    outs = []
    for _ in range(2):
        model = create_model(ModelConfig(kind, K=4, hidden=3), ring(3) if kind == "tgcn" else None)
        model.init_params(np.random.default_rng(seed))
        X = np.random.default_rng(seed + 1).standard_normal((2, 3, 4))
        outs.append(model.predict(X))
        assert outs[-1].shape == (2, 3, 1) and np.all(np.isfinite(outs[-1]))
    np.testing.assert_array_equal(outs[0], outs[1])
