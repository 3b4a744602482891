import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairdemand.dataset import ProtectedAttributeTable, label_groups
from fairdemand.diffcore import Graph
from fairdemand.fairness import (
    PEARSON_EPS,
    SQRT_EPS,
    AccuracyVector,
    FairnessError,
    ape,
    ape_expr,
    attribute_corr_matrix,
    benchmark_regularizer_expr,
    correlation_expr,
    correlation_vector,
    fairness_report,
    masked_attribute_stats,
    multiple_correlation,
    multiple_correlation_expr,
    pag,
    pearson,
)

from conftest import check_graph_grads


# -- independent oracles ---------------------------------------------------------

def pearson_oracle(e, z):
    """Two-pass textbook Pearson with the exp(-20) denominator guard."""
    n = len(e)
    me = math.fsum(e) / n
    mz = math.fsum(z) / n
    sxy = math.fsum((a - me) * (b - mz) for a, b in zip(e, z))
    sxx = math.fsum((a - me) ** 2 for a in e)
    syy = math.fsum((b - mz) ** 2 for b in z)
    return sxy / (math.sqrt(sxx) * math.sqrt(syy) + math.exp(-20))


def pag_oracle(e, labels):
    dis = [v for v, l in zip(e, labels) if l == -1]
    adv = [v for v, l in zip(e, labels) if l == 1]
    return (sum(dis) / len(dis) - sum(adv) / len(adv)) * 100


def ols_r2_oracle(e, Z):
    """Coefficient of determination of e on [1, Z] via the normal equations."""
    X = np.column_stack([np.ones(len(e)), Z])
    beta = np.linalg.solve(X.T @ X, X.T @ e)
    resid = e - X @ beta
    return 1 - (resid @ resid) / ((e - e.mean()) @ (e - e.mean()))


def make_table(Z, directions=None):
    Z = np.asarray(Z, float)
    N, Q = Z.shape
    return ProtectedAttributeTable(
        tuple(f"n{i}" for i in range(N)), tuple(f"a{j}" for j in range(Q)), Z, directions or ("high",) * Q
    )


# -- ape -----------------------------------------------------------------------

def test_ape_examples():
    acc = ape([10.0, 10.0, 0.0, 0.5], [8.0, 10.0, 3.0, 1.0])
    np.testing.assert_allclose(acc.e[:2], [0.2, 0.0])
    assert acc.mask.tolist() == [True, True, False, False]


def test_ape_shape_mismatch():
    with pytest.raises(FairnessError):
        ape([1.0, 2.0], [1.0])


# -- pag -------------------------------------------------------------------------

def test_pag_examples():
    lab = label_groups(make_table(np.arange(10.0)[:, None] / 10))
    e = np.zeros(10)
    e[lab.disadvantaged(0)] = 0.2
    e[lab.advantaged(0)] = 0.2
    assert pag(AccuracyVector(e, np.ones(10, bool)), lab, 0) == 0.0
    e[lab.disadvantaged(0)] = 0.3
    e[lab.advantaged(0)] = 0.1
    assert pag(AccuracyVector(e, np.ones(10, bool)), lab, 0) == pytest.approx(20.0, abs=1e-12)


def test_pag_empty_group_is_unavailable():
    lab = label_groups(make_table(np.arange(10.0)[:, None] / 10))
    mask = np.ones(10, bool)
    mask[lab.advantaged(0)] = False
    assert pag(AccuracyVector(np.ones(10), mask), lab, 0) is None


def test_pag_degenerate_is_unavailable():
    lab = label_groups(make_table(np.full((6, 1), 0.5)))
    assert pag(AccuracyVector(np.ones(6), np.ones(6, bool)), lab, 0) is None


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(5, 40))
def test_pag_matches_brute_force_and_is_antisymmetric(seed, n):
    rng = np.random.default_rng(seed)
    lab = label_groups(make_table(rng.random((n, 1))))
    e = rng.random(n)
    acc = AccuracyVector(e, np.ones(n, bool))
    value = pag(acc, lab, 0)
    assert abs(value - pag_oracle(e, lab.labels[0])) < 1e-12
    assert pag(acc, lab.swapped(), 0) == -value


# -- pearson ---------------------------------------------------------------------

def test_pearson_examples():
    # 1 - r(z, z) = eps / (S + eps) with S the centered sum of squares; S = 82.5 here
    z = np.arange(1.0, 11.0)
    assert abs(pearson(z, z) - 1.0) < 1e-9
    small = np.array([0.1, 0.5, 0.2, 0.9])
    assert abs(pearson(small, small) - 1.0) < 1e-8
    assert pearson(np.full(4, 0.3), small) == 0.0
    assert pearson(small, np.full(4, 0.7)) == 0.0
    with pytest.raises(FairnessError):
        pearson(small, z)
    with pytest.raises(FairnessError):
        pearson(np.array([1.0, 2.0]), np.array([1.0, 2.0]), mask=np.array([True, False]))


def test_pearson_ignores_masked_nodes():
    e = np.array([1.0, 2.0, 3.0, 100.0])
    z = np.array([0.1, 0.2, 0.3, -5.0])
    acc = AccuracyVector(e, np.array([True, True, True, False]))
    assert abs(pearson(acc, z) - pearson_oracle(e[:3], z[:3])) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_pearson_matches_two_pass(seed):
    rng = np.random.default_rng(seed)
    e, z = rng.random(50), rng.random(50)
    assert abs(pearson(e, z) - pearson_oracle(e, z)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 30))
def test_correlation_vector_bounded(seed, n):
    rng = np.random.default_rng(seed)
    c = correlation_vector(AccuracyVector(rng.random(n), np.ones(n, bool)), rng.random((n, 3)))
    assert np.all(np.abs(c) <= 1 + 1e-9)


# -- attribute correlation matrix -------------------------------------------------

def test_omega_single_attribute():
    m = attribute_corr_matrix(np.random.default_rng(0).random((10, 1)))
    assert m.omega.tolist() == [[1.0]]
    assert abs(m.omega_inv[0, 0] - 1 / (1 + 1e-8)) < 1e-15


def test_omega_identical_attributes_ridge_keeps_inverse_finite():
    z = np.random.default_rng(1).random(20)
    m = attribute_corr_matrix(np.column_stack([z, z]))
    # the exp(-20) guard keeps self-correlation a hair below 1
    assert abs(m.omega[0, 1] - 1) < 1e-8
    assert np.all(np.isfinite(m.omega_inv))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5))
def test_omega_invariants(seed, q):
    Z = np.random.default_rng(seed).random((30, q))
    m = attribute_corr_matrix(Z)
    np.testing.assert_array_equal(m.omega, m.omega.T)
    np.testing.assert_array_equal(np.diag(m.omega), np.ones(q))
    np.testing.assert_allclose(m.omega_inv @ (m.omega + 1e-8 * np.eye(q)), np.eye(q), atol=1e-8)
    assert np.linalg.eigvalsh(m.omega + 1e-8 * np.eye(q)).min() > 0
    for j, k in itertools.combinations(range(q), 2):
        assert abs(m.omega[j, k] - pearson_oracle(Z[:, j], Z[:, k])) < 1e-12


def test_omega_rejects_tiny_inputs():
    with pytest.raises(FairnessError):
        attribute_corr_matrix(np.zeros((2, 1)))


# -- multiple correlation ----------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_single_attribute_reduces_to_abs_pearson(seed):
    rng = np.random.default_rng(seed)
    e, z = rng.random(40), rng.random((40, 1))
    acc = AccuracyVector(e, np.ones(40, bool))
    R = multiple_correlation(acc, z, attribute_corr_matrix(z).omega_inv)
    assert abs(R - abs(pearson(e, z[:, 0]))) < 1e-6


def test_constant_error_gives_zero_R():
    Z = np.random.default_rng(2).random((20, 3))
    acc = AccuracyVector(np.full(20, 0.3), np.ones(20, bool))
    assert multiple_correlation(acc, Z, attribute_corr_matrix(Z).omega_inv) == pytest.approx(math.sqrt(SQRT_EPS))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([2, 4]))
def test_R_squared_matches_ols(seed, q):
    rng = np.random.default_rng(seed)
    Z = rng.random((200, q))
    e = Z @ rng.normal(size=q) + rng.normal(size=200)
    R = multiple_correlation(AccuracyVector(e, np.ones(200, bool)), Z, attribute_corr_matrix(Z).omega_inv)
    assert abs(R ** 2 - SQRT_EPS - ols_r2_oracle(e, Z)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(8, 50), st.integers(1, 4))
def test_R_bounded(seed, n, q):
    rng = np.random.default_rng(seed)
    Z = rng.random((n, q))
    m = attribute_corr_matrix(Z)
    if m.condition >= 1e8:
        return
    R = multiple_correlation(AccuracyVector(rng.random(n), np.ones(n, bool)), Z, m.omega_inv)
    assert 0 <= R <= 1 + 1e-6


def test_correlation_metrics_do_not_take_labels():
    import inspect

    for fn in (pearson, multiple_correlation, correlation_vector):
        assert "label" not in " ".join(inspect.signature(fn).parameters)


# -- differentiable versions ------------------------------------------------------

def r_graph(y, Z, omega_inv, M_axis=False):
    g = Graph()
    p = g.input("p", shape=y.shape)
    mask = y >= 1
    denom = np.where(mask, y, 1.0)
    z_c, z_norm = masked_attribute_stats(mask, Z)
    w = mask.astype(float)
    n = np.maximum(w.sum(axis=-1, keepdims=True), 1.0)
    e = ape_expr(p, y, denom) * w
    c = correlation_expr(e, w, n, z_c, z_norm)
    g.set_output(multiple_correlation_expr(c, omega_inv).mean())
    return g, c


def test_R_expression_matches_numpy():
    rng = np.random.default_rng(3)
    y = rng.poisson(5, size=12).astype(float)
    Z = rng.random((12, 3))
    p = y + rng.normal(size=12)
    m = attribute_corr_matrix(Z)
    g, _ = r_graph(y, Z, m.omega_inv)
    # the expression guards the APE norm with sqrt(. + 1e-12); the numpy metric does not
    assert abs(g.evaluate({"p": p}) - multiple_correlation(ape(y, p), Z, m.omega_inv)) < 1e-9


def test_R_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(30):
        y = rng.uniform(2, 20, size=8)
        Z = rng.random((8, 3))
        m = attribute_corr_matrix(Z)
        p = y * (1 + rng.uniform(0.05, 0.5, size=8) * rng.choice([-1, 1], size=8))
        g, _ = r_graph(y, Z, m.omega_inv)
        if g.evaluate({"p": p}) < 1e-3:
            continue
        check_graph_grads(g, {"p": p}, ["p"], h=1e-6)
        checked += 1
    assert checked >= 20


def test_batched_R_expression():
    rng = np.random.default_rng(5)
    y = rng.poisson(4, size=(3, 2, 10)).astype(float)
    Z = rng.random((10, 2))
    p = y + rng.normal(size=y.shape)
    m = attribute_corr_matrix(Z)
    g, _ = r_graph(y, Z, m.omega_inv)
    expect = np.mean([multiple_correlation(ape(y[a, b], p[a, b]), Z, m.omega_inv) for a in range(3) for b in range(2)])
    assert abs(g.evaluate({"p": p}) - expect) < 1e-9


# -- benchmark regularizers ------------------------------------------------------

def two_group_labeling():
    # 10 nodes; 1..4 disadvantaged, 7..10 advantaged for direction "high"
    return label_groups(make_table(np.arange(1, 11)[:, None] / 10))


def reg_value(kind, pred, lab, scale=None):
    g = Graph()
    p = g.input("p")
    g.set_output(benchmark_regularizer_expr(kind, p, lab, 0, scale))
    return g.evaluate({"p": pred}), g


def test_em_examples():
    lab = two_group_labeling()
    pred = np.full(10, 5.0)
    assert reg_value("em", pred, lab)[0] == 0.0
    pred[lab.advantaged(0)] = 10.0
    pred[lab.disadvantaged(0)] = 20.0
    assert reg_value("em", pred, lab)[0] == 100.0


def test_rfg_and_ifg_match_enumeration():
    rng = np.random.default_rng(6)
    lab = two_group_labeling()
    pred = rng.uniform(1, 10, size=10)
    scale = rng.uniform(1, 5, size=10)
    proxy = pred / scale
    adv, dis = lab.advantaged(0), lab.disadvantaged(0)
    rfg = (proxy[adv].mean() - proxy[dis].mean()) ** 2
    ifg = np.mean([(proxy[a] - proxy[d]) ** 2 for a in adv for d in dis])
    assert reg_value("rfg", pred, lab, scale)[0] == pytest.approx(rfg, rel=1e-12)
    assert reg_value("ifg", pred, lab, scale)[0] == pytest.approx(ifg, rel=1e-12)


def test_ifg_two_by_two_toy():
    # 5 nodes: z = .1 .2 .3 .4 .5 -> two disadvantaged (.1, .2), two advantaged (.4, .5)
    lab = label_groups(make_table(np.array([[0.1], [0.2], [0.3], [0.4], [0.5]])))
    assert lab.disadvantaged(0).tolist() == [0, 1] and lab.advantaged(0).tolist() == [3, 4]
    pred = np.array([1.0, 2.0, 7.0, 4.0, 6.0])
    pairs = [(pred[a] - pred[d]) ** 2 for a in (3, 4) for d in (0, 1)]
    assert reg_value("ifg", pred, lab, np.ones(5))[0] == pytest.approx(sum(pairs) / 4, rel=1e-12)


@pytest.mark.parametrize("kind", ["em", "rfg", "ifg"])
def test_regularizer_gradients(kind):
    rng = np.random.default_rng(7)
    lab = two_group_labeling()
    pred = rng.uniform(1, 10, size=(3, 10))
    _, g = reg_value(kind, pred, lab, rng.uniform(1, 5, size=10))
    check_graph_grads(g, {"p": pred}, ["p"])


def test_regularizer_errors():
    lab = two_group_labeling()
    with pytest.raises(FairnessError):
        reg_value("xyz", np.ones(10), lab)
    with pytest.raises(FairnessError):
        reg_value("rfg", np.ones(10), lab, None)
    flat = label_groups(make_table(np.full((6, 1), 0.5)))
    with pytest.raises(FairnessError):
        reg_value("em", np.ones(6), flat)


# -- report ------------------------------------------------------------------------

def test_perfect_predictions_report():
    rng = np.random.default_rng(8)
    y = rng.poisson(6, size=(5, 10, 1)).astype(float) + 1
    table = make_table(rng.random((10, 2)))
    r = fairness_report(y, y.copy(), table, label_groups(table))
    assert r.mae == 0 and r.rmse == 0
    assert all(v == 0 for v in r.corr.values()) and all(v == 0 for v in r.pag.values())


@pytest.mark.parametrize("pooling", ["per_step", "pooled"])
def test_report_matches_brute_force(pooling):
    rng = np.random.default_rng(9)
    S, N, M = 6, 12, 2
    y = rng.poisson(5, size=(S, N, M)).astype(float)
    p = y + rng.normal(0, 2, size=y.shape)
    table = make_table(rng.random((N, 2)))
    lab = label_groups(table)
    r = fairness_report(y, p, table, lab, pooling=pooling)
    diffs = [p[s, i, m] - y[s, i, m] for s in range(S) for i in range(N) for m in range(M)]
    assert abs(r.mae - math.fsum(abs(d) for d in diffs) / len(diffs)) < 1e-12
    assert abs(r.rmse - math.sqrt(math.fsum(d * d for d in diffs) / len(diffs))) < 1e-12
    for j, name in enumerate(table.names):
        if pooling == "per_step":
            corrs, gaps = [], []
            for s in range(S):
                for m in range(M):
                    keep = [i for i in range(N) if y[s, i, m] >= 1]
                    e = [abs(y[s, i, m] - p[s, i, m]) / y[s, i, m] for i in keep]
                    corrs.append(pearson_oracle(e, table.Z[keep, j]))
                    labels = lab.labels[j][keep]
                    if (labels == 1).any() and (labels == -1).any():
                        gaps.append(pag_oracle(e, labels))
            assert abs(r.corr[name] - np.mean(corrs)) < 1e-12
            assert abs(r.pag[name] - np.mean(gaps)) < 1e-12
        else:
            e, z, labels = [], [], []
            for s in range(S):
                for m in range(M):
                    for i in range(N):
                        if y[s, i, m] >= 1:
                            e.append(abs(y[s, i, m] - p[s, i, m]) / y[s, i, m])
                            z.append(table.Z[i, j])
                            labels.append(lab.labels[j][i])
            assert abs(r.corr[name] - pearson_oracle(e, z)) < 1e-12
            assert abs(r.pag[name] - pag_oracle(e, labels)) < 1e-12


def test_report_rejects_unknown_pooling():
    table = make_table(np.random.default_rng(0).random((6, 1)))
    y = np.ones((2, 6, 1))
    with pytest.raises(FairnessError):
        fairness_report(y, y, table, label_groups(table), pooling="weird")


def test_report_row_layout():
    table = make_table(np.random.default_rng(0).random((6, 2)))
    y = np.full((2, 6, 1), 3.0)
    row = fairness_report(y, y + 1, table, label_groups(table), "ha", 0.1).row()
    assert list(row) == ["model", "lambda", "MAE", "RMSE", "a0:Corr", "a0:PAG", "a1:Corr", "a1:PAG"]


def test_pearson_eps_constant():
    assert PEARSON_EPS == math.exp(-20)
