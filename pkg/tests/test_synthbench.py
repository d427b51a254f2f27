import json

import numpy as np
import pandas as pd
import pytest
from scipy import special

from statfuse.gbdt import TrainParams
from statfuse.microdata import load_microdata
from statfuse.pipeline import FusionSpec, ImplicateSet, fuse, train_fusion
from statfuse.synthbench import (
    Linear,
    Response,
    SynthConfig,
    Truth,
    fusion_steps,
    generate_population,
    load_config,
    score_recovery,
    write_population,
)
from statfuse.validation import value_added


def test_config_contracts():
    with pytest.raises(ValueError, match="exceed"):
        SynthConfig(population=100, n_donor=60, n_recipient=50)
    with pytest.raises(ValueError, match="positive"):
        SynthConfig(population=100, n_donor=60, n_recipient=0)
    with pytest.raises(ValueError):
        Response("z", "linear", noise=-1.0)
    with pytest.raises(ValueError):
        Response("z", "probit")
    with pytest.raises(ValueError):
        SynthConfig(population=100, n_donor=10, n_recipient=10, weights="pareto")
    with pytest.raises(ValueError):
        SynthConfig(population=100, n_donor=10, n_recipient=10, categorical={"r": {"a": 0.5, "b": 0.6}})


def test_config_roundtrip_yaml(tmp_path):
    cfg = SynthConfig(population=500, n_donor=100, n_recipient=100, seed=4)
    import yaml

    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(cfg.to_dict()))
    back = load_config(p)
    assert back.to_dict() == cfg.to_dict()


def test_closed_form_moments():
    t = Truth(SynthConfig(population=500, n_donor=100, n_recipient=100))
    # 10 + region effects .3(1) + .2(-1) + .1(2) + tenure .65(1)
    assert t.mean("elec") == pytest.approx(10.95, abs=1e-10)
    assert t.mean("elec", {"region": "c", "tenure": "rent"}) == pytest.approx(9.0, abs=1e-10)
    assert t.zero_share("fuel") == pytest.approx(0.6, abs=1e-8)
    # nonzero and magnitude parts depend on disjoint independent predictors, so
    # the mean factorises into lognormal moments
    mag = np.exp(3.0 + 0.125 + 0.125) * (0.65 * np.exp(0.3) + 0.35)
    assert t.mean("fuel") == pytest.approx(0.4 * mag, rel=1e-9)
    s = t.level_shares("heat")
    assert sum(s.values()) == pytest.approx(1.0, abs=1e-12)


def test_level_shares_monte_carlo():
    cfg = SynthConfig(population=500, n_donor=100, n_recipient=100)
    t = Truth(cfg)
    rng = np.random.default_rng(0)
    n = 400_000
    X = pd.DataFrame({"x1": rng.standard_normal(n), "x2": rng.standard_normal(n),
                      "region": rng.choice(list("abcd"), n, p=[.4, .3, .2, .1]),
                      "tenure": rng.choice(["own", "rent"], n, p=[.65, .35])})
    S = np.column_stack([np.zeros(n),
                         0.2 + 0.8 * X["x1"] + 0.7 * (X["region"] == "c"),
                         -0.8 - 0.7 * X["x2"] + 0.6 * (X["tenure"] == "own")])
    mc = special.softmax(S, axis=1).mean(axis=0)
    got = t.level_shares("heat")
    for j, lv in enumerate(["gas", "electric", "oil"]):
        assert abs(got[lv] - mc[j]) < 3 * np.sqrt(mc[j] * (1 - mc[j]) / n)


def test_deterministic_tables():
    cfg = SynthConfig(population=3000, n_donor=500, n_recipient=500, n_replicates=3, seed=9)
    a = generate_population(cfg)
    b = generate_population(cfg)
    pd.testing.assert_frame_equal(a[0].frame, b[0].frame)
    pd.testing.assert_frame_equal(a[1].frame, b[1].frame)
    pd.testing.assert_frame_equal(a[2].recipient_values, b[2].recipient_values)
    c = generate_population(SynthConfig(population=3000, n_donor=500, n_recipient=500, n_replicates=3, seed=10))
    assert not a[0].frame["elec"].equals(c[0].frame["elec"])


def test_disjoint_samples():
    donor, rec, _ = generate_population(SynthConfig(population=3000, n_donor=1000, n_recipient=2000,
                                                    n_replicates=2))
    assert not set(donor.ids) & set(rec.ids)
    assert not any(rec.has(v) for v in ["elec", "heat", "fuel", "use_day"])
    assert rec.replicate_weights.shape == (2000, 2)


def test_zero_share_binomial_bound():
    cfg = SynthConfig(population=30_000, n_donor=10_000, n_recipient=100, n_replicates=2, seed=21)
    donor, _, _ = generate_population(cfg)
    assert abs(np.mean(donor.values("fuel") == 0) - 0.6) < 0.015


def test_generator_moments_within_three_sigma():
    cfg = SynthConfig(population=100_001, n_donor=100_000, n_recipient=1, n_replicates=1, seed=3)
    donor, _, truth = generate_population(cfg)
    n = donor.n
    elec = donor.values("elec")
    assert abs(elec.mean() - truth.mean("elec")) < 3 * elec.std() / np.sqrt(n)
    fuel = donor.values("fuel")
    assert abs(fuel.mean() - truth.mean("fuel")) < 3 * fuel.std() / np.sqrt(n)
    z = truth.zero_share("fuel")
    assert abs(np.mean(fuel == 0) - z) < 3 * np.sqrt(z * (1 - z) / n)
    heat = donor.frame["heat"].astype(str).to_numpy()
    for lv, p in truth.level_shares("heat").items():
        assert abs(np.mean(heat == lv) - p) < 3 * np.sqrt(p * (1 - p) / n)
    day = donor.values("use_day")
    assert np.allclose(day + donor.values("use_night"), 1.0, atol=1e-15)


def test_zero_noise_linear():
    resp = [Response("elec", "linear", Linear(1.0, {"x1": 2.0, "region": {"b": 3.0}}), noise=0.0)]
    cfg = SynthConfig(population=6000, n_donor=2000, n_recipient=500, n_replicates=2, responses=resp, seed=2)
    donor, rec, truth = generate_population(cfg)
    assert np.all(truth.conditional_var("elec", donor.frame) == 0)
    assert np.array_equal(donor.values("elec"), truth.conditional_mean("elec", donor.frame))
    spec = FusionSpec(steps=["elec"], predictors=cfg.predictors, M=2, K=50,
                      train=TrainParams(leaf_grid=(16,), folds=2, max_iterations=200))
    imp = fuse(train_fusion(donor, spec), rec)
    fused = imp.implicate(1)["elec"].to_numpy()
    assert set(fused) <= set(donor.values("elec"))
    g = truth.conditional_mean("elec", rec.frame)
    assert np.corrcoef(fused, g)[0, 1] > 0.99


class EmpiricalTruth(Truth):
    """Truth read off the recipient's hidden values with recipient weights."""

    def __init__(self, config, hidden, recipient):
        super().__init__(config, hidden)
        self.frame = pd.concat([recipient.frame.reset_index(drop=True), hidden.drop(columns="id")], axis=1)
        self.w = recipient.weights

    def _sel(self, sub):
        m = np.ones(len(self.frame), dtype=bool)
        for k, v in (sub or {}).items():
            m &= self.frame[k].astype(str).to_numpy() == v
        return m

    def mean(self, var, subgroup=None):
        m = self._sel(subgroup)
        return float(np.average(self.frame[var].to_numpy()[m], weights=self.w[m]))

    def zero_share(self, var, subgroup=None):
        m = self._sel(subgroup)
        return float(np.average(self.frame[var].to_numpy()[m] == 0, weights=self.w[m]))

    def level_shares(self, var, subgroup=None):
        m = self._sel(subgroup)
        col = self.frame[var].astype(str).to_numpy()[m]
        return {lv: float(np.average(col == lv, weights=self.w[m])) for lv in self._response(var).levels}


def _hidden_implicates(rec, truth, M=3, shuffle_seed=None):
    hidden = truth.recipient_values
    frames = []
    rng = np.random.default_rng(shuffle_seed)
    for m in range(1, M + 1):
        f = hidden.copy()
        if shuffle_seed is not None:
            f.iloc[:, 1:] = f.iloc[:, 1:].to_numpy()[rng.permutation(len(f))]
        f.insert(1, "implicate", m)
        f["heat"] = pd.Categorical(f["heat"], categories=["gas", "electric", "oil"])
        frames.append(f)
    variables = [c for c in hidden.columns if c != "id"]
    return ImplicateSet(pd.concat(frames, ignore_index=True), "id", variables, M)


@pytest.fixture(scope="module")
def bench():
    cfg = SynthConfig(population=20_000, n_donor=2000, n_recipient=8000, n_replicates=4, seed=8)
    donor, rec, truth = generate_population(cfg)
    return cfg, rec, truth


def test_truth_equal_implicates_score_perfectly(bench):
    cfg, rec, truth = bench
    et = EmpiricalTruth(cfg, truth.recipient_values, rec)
    sc = score_recovery(_hidden_implicates(rec, truth), rec, et)
    assert sc["abs_error"].max() < 1e-9
    assert sc["covered"].dropna().all()
    assert set(sc["statistic"]) == {"mean", "share:gas", "share:electric", "share:oil",
                                    "zero_share", "joint_frequency"}


def test_shuffled_implicates_have_no_value(bench):
    cfg, rec, truth = bench
    sc = score_recovery(_hidden_implicates(rec, truth, shuffle_seed=1), rec, truth)
    elec = sc[(sc["variable"] == "elec") & (sc["subgroup"] != "all")]
    grand = truth.mean("elec")
    v = value_added(elec["point"].to_numpy(), elec["truth"].to_numpy(), grand)
    assert np.median(v) < 0.2
    block = sc[sc["statistic"] == "joint_frequency"]["abs_error"].iloc[0]
    assert block < 0.05  # marginal-preserving shuffle keeps the joint cells


def test_write_population(tmp_path):
    cfg = SynthConfig(population=2000, n_donor=300, n_recipient=200, n_replicates=2, seed=1)
    man = write_population(cfg, tmp_path)
    assert {p.name for p in tmp_path.iterdir()} >= {"donor.csv", "donor.schema.yaml", "recipient.csv",
                                                  "recipient.schema.yaml", "recipient_truth.csv",
                                                  "truth.json"}
    d = load_microdata(tmp_path / "donor.csv")
    assert d.n == 300 and d.spec("fuel").kind == "semicontinuous"
    assert json.loads((tmp_path / "truth.json").read_text())["steps"] == man["steps"]
    assert man["steps"] == fusion_steps(cfg)
