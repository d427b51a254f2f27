import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from statfuse.prescreen import (
    design_matrix,
    family_for,
    lasso_path,
    prescreen,
    screen_predictors,
)


def _noise_frame(rng, n, p):
    X = rng.normal(size=(n, p))
    return pd.DataFrame(X, columns=[f"v{j}" for j in range(p)])


def test_exact_linear_response_recovers_single_column():
    rng = np.random.default_rng(3)
    df = _noise_frame(rng, 300, 6)
    Z, names, parents = design_matrix(df, list(df.columns), np.ones(300))
    y = 2.0 * df["v0"].to_numpy()
    path = lasso_path(Z, y, "gaussian", column_names=names, parents=parents)
    assert path.deviance_explained[-1] > 0.99
    assert path.support(len(path.lambdas) - 1) == ["v0"]
    # one standardised exact predictor: lambda_max = 2 sd and beta(lambda) = 2 sd - lambda
    sd = df["v0"].std(ddof=0)
    assert path.lambdas[0] == pytest.approx(2.0 * sd, rel=1e-10)
    grid = np.geomspace(2.0 * sd, 2e-3 * sd, 100)
    full = lasso_path(Z, y, "gaussian", lambdas=grid)
    assert full.coefs[-1][0] == pytest.approx(2.0 * sd * (1 - 1e-3), rel=1e-6)
    assert np.all(full.coefs[-1][1:] == 0)


def test_largest_lambda_is_all_zero():
    rng = np.random.default_rng(0)
    df = _noise_frame(rng, 200, 5)
    Z, names, _ = design_matrix(df, list(df.columns), np.ones(200))
    y = df["v1"].to_numpy() + rng.normal(size=200)
    for fam, resp in [("gaussian", y), ("binomial", (y > 0).astype(float)),
                      ("multinomial", np.digitize(y, [-1, 1]))]:
        path = lasso_path(Z, resp, fam)
        assert np.all(path.coefs[0] == 0)
        assert np.all(np.diff(path.lambdas) < 0)


def test_default_grid_spans_three_decades():
    rng = np.random.default_rng(1)
    df = _noise_frame(rng, 200, 4)
    Z, _, _ = design_matrix(df, list(df.columns), np.ones(200))
    y = Z @ np.array([1.0, 0.5, 0.0, 0.0]) + rng.normal(size=200)
    path = lasso_path(Z, y, "gaussian", lambdas=None)
    # an explicit grid is always fitted in full
    grid = np.geomspace(path.lambdas[0], 1e-3 * path.lambdas[0], 100)
    full = lasso_path(Z, y, "gaussian", lambdas=grid)
    assert len(full.lambdas) == 100
    assert full.lambdas[-1] == pytest.approx(1e-3 * full.lambdas[0])


def test_non_finite_features_rejected():
    Z = np.ones((20, 2))
    Z[3, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        lasso_path(Z, np.arange(20.0), "gaussian")


def test_independent_response_selects_nothing():
    rng = np.random.default_rng(11)
    df = _noise_frame(rng, 1000, 20)
    res = prescreen(df, list(df.columns), rng.normal(size=1000), "gaussian", np.ones(1000))
    assert res.selected == []
    assert res.null_model


@pytest.mark.parametrize("seed", range(20))
def test_perfect_predictor_among_fifty_noise_columns(seed):
    rng = np.random.default_rng(seed)
    df = _noise_frame(rng, 500, 51)
    y = 1.5 * df["v7"].to_numpy() - 0.3
    res = prescreen(df, list(df.columns), y, "gaussian", np.ones(500))
    assert res.selected == ["v7"]


def test_duplicated_perfect_predictor_keeps_one_copy():
    rng = np.random.default_rng(5)
    df = _noise_frame(rng, 400, 10)
    df["dup"] = df["v2"]
    res = prescreen(df, list(df.columns), df["v2"].to_numpy(), "gaussian", np.ones(400))
    assert {"v2", "dup"} & set(res.selected)


def test_threshold_zero_takes_smallest_support():
    rng = np.random.default_rng(2)
    df = _noise_frame(rng, 300, 5)
    Z, names, parents = design_matrix(df, list(df.columns), np.ones(300))
    path = lasso_path(Z, Z[:, 0] + 0.5 * Z[:, 1] + rng.normal(size=300), "gaussian",
                      column_names=names, parents=parents)
    assert screen_predictors(path, threshold=0.0).selected == []


def test_indicator_columns_collapse_to_parent():
    rng = np.random.default_rng(4)
    n = 600
    cat = pd.Categorical(rng.choice(["a", "b", "c"], size=n))
    df = pd.DataFrame({"region": cat, "x": rng.normal(size=n), "noise": rng.normal(size=n)})
    y = np.asarray(cat.codes == 2, float) * 3.0 + df["x"].to_numpy()
    res = prescreen(df, ["region", "x", "noise"], y, "gaussian", np.ones(n))
    assert set(res.selected) >= {"region", "x"}
    assert all(s in ("region", "x", "noise") for s in res.selected)


def test_forced_names_bypass_screening():
    rng = np.random.default_rng(6)
    df = _noise_frame(rng, 300, 4)
    res = prescreen(df, list(df.columns), rng.normal(size=300), "gaussian", np.ones(300),
                    forced=["earlier"])
    assert res.selected == ["earlier"]
    assert res.forced == ["earlier"]


def test_binomial_and_multinomial_find_signal():
    rng = np.random.default_rng(8)
    n = 1500
    df = _noise_frame(rng, n, 8)
    lin = 2.0 * df["v3"].to_numpy()
    yb = (lin + rng.logistic(size=n) > 0).astype(float)
    assert "v3" in prescreen(df, list(df.columns), yb, "binomial", np.ones(n)).selected
    yc = np.digitize(df["v5"].to_numpy() + 0.4 * rng.normal(size=n), [-0.7, 0.0, 0.7])
    mres = prescreen(df, list(df.columns), yc, "multinomial", np.ones(n))
    assert "v5" in mres.selected
    assert 0 < mres.deviance <= mres.full_deviance <= 1


def test_multinomial_with_two_observed_classes_falls_back_to_binomial():
    rng = np.random.default_rng(9)
    df = _noise_frame(rng, 400, 3)
    y = np.where(df["v0"] + 0.5 * rng.normal(size=400) > 0, 4, 1)  # codes with gaps
    res = prescreen(df, list(df.columns), y, "multinomial", np.ones(400))
    assert res.selected == ["v0"]


def test_single_class_response_is_null():
    rng = np.random.default_rng(9)
    df = _noise_frame(rng, 50, 3)
    res = prescreen(df, list(df.columns), np.zeros(50, int), "multinomial", np.ones(50))
    assert res.null_model and res.selected == []


def test_family_for():
    assert family_for("continuous") == "gaussian"
    assert family_for("semicontinuous") == "gaussian"
    assert family_for("categorical", 2) == "binomial"
    assert family_for("categorical", 5) == "multinomial"


def test_weights_change_the_fit_but_not_validity():
    rng = np.random.default_rng(12)
    n = 800
    df = _noise_frame(rng, n, 5)
    y = df["v0"].to_numpy() + rng.normal(size=n)
    w = rng.gamma(2.0, size=n)
    res = prescreen(df, list(df.columns), y, "gaussian", w)
    assert "v0" in res.selected


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    scale=st.floats(0.01, 100.0),
    shift=st.floats(-1e3, 1e3),
    col=st.integers(0, 5),
)
def test_selection_invariant_to_affine_rescaling(seed, scale, shift, col):
    rng = np.random.default_rng(seed)
    n = 300
    df = _noise_frame(rng, n, 6)
    y = df["v0"].to_numpy() - 0.7 * df["v1"].to_numpy() + rng.normal(size=n)
    base = prescreen(df, list(df.columns), y, "gaussian", np.ones(n))
    moved = df.copy()
    moved[f"v{col}"] = moved[f"v{col}"] * scale + shift
    other = prescreen(moved, list(df.columns), y, "gaussian", np.ones(n))
    assert set(base.selected) == set(other.selected)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), family=st.sampled_from(["gaussian", "binomial", "multinomial"]))
def test_deviance_non_decreasing_along_path(seed, family):
    rng = np.random.default_rng(seed)
    n = 300
    df = _noise_frame(rng, n, 6)
    Z, _, _ = design_matrix(df, list(df.columns), np.ones(n))
    lin = Z[:, 0] - Z[:, 2] + rng.normal(size=n)
    resp = {"gaussian": lin, "binomial": (lin > 0).astype(float),
            "multinomial": np.digitize(lin, [-1.0, 0.5])}[family]
    path = lasso_path(Z, resp, family)
    assert np.all(np.diff(path.deviance_explained) >= -1e-6)
    assert np.all(path.coefs[0] == 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), rho=st.floats(0.55, 0.95))
def test_correlated_predictor_never_screened_out(seed, rho):
    rng = np.random.default_rng(seed)
    n = 500
    df = _noise_frame(rng, n, 8)
    x = df["v4"].to_numpy()
    y = rho * x + np.sqrt(1 - rho**2) * rng.normal(size=n)
    res = prescreen(df, list(df.columns), y, "gaussian", np.ones(n))
    assert res.selected
    assert set(res.selected) <= set(df.columns)
