"""Synthetic populations with analytically known conditional structure.

Continuous predictors are independent standard normals and categorical
predictors are independent draws with declared level probabilities, so
every population moment of a response is an exact finite sum over
categorical levels times a Gauss-Hermite integral over the continuous
predictors. No truth value is estimated from simulated data.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from numpy.polynomial.hermite_e import hermegauss
from scipy import optimize, special, stats

from .analysis import AnalysisRequest, estimate
from .microdata import ColumnSpec, Microdata, write_microdata

LINKS = ("linear", "logistic", "zero_inflated", "shares")
GH_NODES = 24


# -- configuration -----------------------------------------------------------------------


@dataclass
class Linear:
    """``intercept + sum coef[x] * x + sum effect[level]`` over predictors."""

    intercept: float = 0.0
    coef: dict = field(default_factory=dict)  # continuous name -> slope; categorical -> {level: effect}

    @classmethod
    def from_any(cls, d) -> "Linear":
        if isinstance(d, Linear):
            return d
        d = d or {}
        return cls(float(d.get("intercept", 0.0)), dict(d.get("coef", {})))

    def to_dict(self) -> dict:
        return {"intercept": self.intercept, "coef": self.coef}

    def evaluate(self, frame) -> np.ndarray:
        n = len(next(iter(frame.values()))) if isinstance(frame, dict) else len(frame)
        out = np.full(n, self.intercept, dtype=np.float64)
        # sorted so that the sum does not depend on how the config was keyed
        for name, c in sorted(self.coef.items()):
            col = np.asarray(frame[name])
            if isinstance(c, dict):
                out += _map_levels(col, c)
            else:
                out += float(c) * col.astype(np.float64)
        return out


def _map_levels(col, effects: dict) -> np.ndarray:
    col = np.asarray(col).astype(str)
    uniq, inv = np.unique(col, return_inverse=True)
    vals = np.array([float(effects.get(u, 0.0)) for u in uniq])
    return vals[inv]


@dataclass
class Response:
    """One fusion variable (or block, for ``shares``).

    linear: ``Z = lin(X) + noise * e``.
    logistic: class ``j`` has score ``lin_j(X)``; probabilities are a softmax.
    zero_inflated: nonzero with probability ``expit(zero(X))``, then
    ``Z = exp(lin(X) + noise * e)``. ``zero_share``, when given, recalibrates
    the zero-model intercept so the population zero share matches it.
    shares: ``len(levels)`` components ``softmax(lin_j(X) + noise * e_j)``,
    fused jointly as a block named ``name_<level>``.
    """

    name: str
    link: str
    lin: Linear = field(default_factory=Linear)
    noise: float = 1.0
    levels: tuple = ()
    class_lin: dict = field(default_factory=dict)
    zero: Linear | None = None
    zero_share: float | None = None

    def __post_init__(self):
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        if self.noise < 0:
            raise ValueError("noise scale must be non-negative")
        self.lin = Linear.from_any(self.lin)
        self.levels = tuple(str(v) for v in self.levels)
        self.class_lin = {str(k): Linear.from_any(v) for k, v in self.class_lin.items()}
        if self.zero is not None:
            self.zero = Linear.from_any(self.zero)
        if self.link in ("logistic", "shares") and len(self.levels) < 2:
            raise ValueError(f"{self.name}: {self.link} needs at least two levels")
        if self.link == "zero_inflated" and self.zero is None:
            self.zero = Linear()

    @property
    def columns(self) -> list:
        if self.link == "shares":
            return [f"{self.name}_{lv}" for lv in self.levels]
        return [self.name]

    @property
    def kind(self) -> str:
        return {"linear": "continuous", "logistic": "categorical",
                "zero_inflated": "semicontinuous", "shares": "continuous"}[self.link]

    def class_score(self, level, frame) -> np.ndarray:
        return self.class_lin.get(level, Linear()).evaluate(frame)

    def to_dict(self) -> dict:
        d = {"name": self.name, "link": self.link, "lin": self.lin.to_dict(), "noise": self.noise}
        if self.levels:
            d["levels"] = list(self.levels)
        if self.class_lin:
            d["class_lin"] = {k: v.to_dict() for k, v in self.class_lin.items()}
        if self.zero is not None:
            d["zero"] = self.zero.to_dict()
        if self.zero_share is not None:
            d["zero_share"] = self.zero_share
        return d


@dataclass
class SynthConfig:
    population: int = 100_000
    n_donor: int = 5_000
    n_recipient: int = 20_000
    continuous: tuple = ("x1", "x2")
    categorical: dict = field(default_factory=lambda: {
        "region": {"a": 0.4, "b": 0.3, "c": 0.2, "d": 0.1},
        "tenure": {"own": 0.65, "rent": 0.35},
    })
    responses: list = field(default_factory=list)
    weights: str = "gamma"  # uniform | gamma
    weight_shape: float = 4.0
    n_replicates: int = 80
    # with factor-4 pooling, s = 1/2 makes the replicate variance unbiased for
    # the sampling variance of a weighted mean
    replicate_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.continuous = tuple(self.continuous)
        self.responses = [r if isinstance(r, Response) else Response(**r) for r in self.responses]
        if not self.responses:
            self.responses = default_responses()
        if not 0.0 <= self.replicate_scale < 1.0:
            raise ValueError("replicate_scale must lie in [0, 1) to keep replicate weights positive")
        if self.n_donor < 1 or self.n_recipient < 1:
            raise ValueError("donor and recipient sizes must be positive")
        if self.n_donor + self.n_recipient > self.population:
            raise ValueError("donor plus recipient sizes exceed the population")
        if self.weights not in ("uniform", "gamma"):
            raise ValueError("weights must be 'uniform' or 'gamma'")
        for name, probs in self.categorical.items():
            p = np.array(list(probs.values()), dtype=np.float64)
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"level probabilities of {name} must sum to 1")
        for r in self.responses:
            if r.link == "zero_inflated" and r.zero_share is not None:
                r.zero = _calibrate_zero(self, r)

    @property
    def predictors(self) -> list:
        return list(self.continuous) + list(self.categorical)

    def to_dict(self) -> dict:
        return {
            "population": self.population, "n_donor": self.n_donor, "n_recipient": self.n_recipient,
            "continuous": list(self.continuous), "categorical": self.categorical,
            "responses": [r.to_dict() for r in self.responses], "weights": self.weights,
            "weight_shape": self.weight_shape, "n_replicates": self.n_replicates,
            "replicate_scale": self.replicate_scale, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**dict(d))


def load_config(path) -> SynthConfig:
    with open(path) as fh:
        return SynthConfig.from_dict(yaml.safe_load(fh) or {})


def default_responses(block: bool = True) -> list:
    """Linear-Gaussian, three-class logistic and 60%-zero variables, plus a two-share block."""
    out = [
        Response("elec", "linear",
                 Linear(10.0, {"x1": 2.0, "x2": 1.0, "region": {"b": 1.0, "c": -1.0, "d": 2.0},
                               "tenure": {"own": 1.0}}),
                 noise=1.5),
        Response("heat", "logistic", levels=("gas", "electric", "oil"),
                 class_lin={"electric": {"intercept": 0.2, "coef": {"x1": 0.8, "region": {"c": 0.7}}},
                            "oil": {"intercept": -0.8, "coef": {"x2": -0.7, "tenure": {"own": 0.6}}}}),
        Response("fuel", "zero_inflated",
                 Linear(3.0, {"x1": 0.5, "tenure": {"own": 0.3}}), noise=0.5,
                 zero=Linear(0.0, {"x2": 0.8, "region": {"d": 0.5}}), zero_share=0.6),
    ]
    if block:
        out.append(Response("use", "shares", Linear(), noise=0.5, levels=("day", "night"),
                            class_lin={"night": {"intercept": -0.3, "coef": {"x1": 0.6}}}))
    return out


# -- quadrature --------------------------------------------------------------------------


def _grid(config: SynthConfig, fixed: dict | None = None):
    """Nodes and weights integrating over predictors not fixed by ``fixed``."""
    fixed = dict(fixed or {})
    d = len(config.continuous)
    x, wx = hermegauss(GH_NODES)
    wx = wx / wx.sum()
    cols = {}
    weight = np.ones(1)
    grids = [x] * d
    mesh = np.array(list(itertools.product(*grids))) if d else np.zeros((1, 0))
    wmesh = np.prod(np.array(list(itertools.product(*([wx] * d)))), axis=1) if d else np.ones(1)
    for j, name in enumerate(config.continuous):
        cols[name] = mesh[:, j]
    weight = wmesh
    n0 = weight.size
    cat_names = list(config.categorical)
    choices = []
    for name in cat_names:
        if name in fixed:
            choices.append([(fixed[name], 1.0)])
        else:
            choices.append(list(config.categorical[name].items()))
    combos = list(itertools.product(*choices)) if cat_names else [()]
    out = {k: np.tile(v, len(combos)) for k, v in cols.items()}
    wt = np.concatenate([weight * np.prod([p for _, p in combo]) for combo in combos])
    for j, name in enumerate(cat_names):
        out[name] = np.repeat(np.array([combo[j][0] for combo in combos], dtype=object), n0)
    return out, wt


def _calibrate_zero(config: SynthConfig, r: Response) -> Linear:
    grid, wt = _grid(config)
    base = Linear(0.0, dict(r.zero.coef)).evaluate(grid)
    target = 1.0 - float(r.zero_share)

    def f(a):
        return float(wt @ special.expit(base + a)) - target

    a = optimize.brentq(f, -50.0, 50.0, xtol=1e-14)
    return Linear(a, dict(r.zero.coef))


# -- truth -------------------------------------------------------------------------------


class Truth:
    """Closed-form population moments of the synthetic responses."""

    def __init__(self, config: SynthConfig, recipient_values: pd.DataFrame | None = None):
        self.config = config
        self.responses = {r.name: r for r in config.responses}
        self.recipient_values = recipient_values

    def _response(self, var) -> Response:
        if var in self.responses:
            return self.responses[var]
        raise KeyError(var)

    # conditional on predictor rows ---------------------------------------------------

    def class_probs(self, var, frame) -> np.ndarray:
        r = self._response(var)
        S = np.column_stack([r.class_score(lv, frame) for lv in r.levels])
        return special.softmax(S, axis=1)

    def nonzero_prob(self, var, frame) -> np.ndarray:
        return special.expit(self._response(var).zero.evaluate(frame))

    def conditional_mean(self, var, frame) -> np.ndarray:
        r = self._response(var)
        if r.link == "linear":
            return r.lin.evaluate(frame)
        if r.link == "zero_inflated":
            return self.nonzero_prob(var, frame) * np.exp(r.lin.evaluate(frame) + 0.5 * r.noise**2)
        raise ValueError(f"{var}: conditional mean defined for linear and zero-inflated links")

    def conditional_var(self, var, frame) -> np.ndarray:
        r = self._response(var)
        if r.link == "linear":
            return np.full(len(frame), r.noise**2)
        raise ValueError(f"{var}: conditional variance defined for linear links")

    def conditional_quantile(self, var, frame, q: float) -> np.ndarray:
        r = self._response(var)
        if r.link == "linear":
            return r.lin.evaluate(frame) + r.noise * stats.norm.ppf(q)
        if r.link == "zero_inflated":
            p = self.nonzero_prob(var, frame)
            # F(z) = (1 - p) + p Phi((log z - lin) / s) for z > 0
            qq = np.clip((q - (1.0 - p)) / np.maximum(p, 1e-300), 0.0, 1.0)
            out = np.exp(r.lin.evaluate(frame) + r.noise * stats.norm.ppf(np.clip(qq, 1e-300, 1.0)))
            return np.where(q <= 1.0 - p, 0.0, out)
        raise ValueError(f"{var}: quantiles defined for linear and zero-inflated links")

    # population moments ------------------------------------------------------------

    def mean(self, var, subgroup: dict | None = None) -> float:
        """Population mean of a linear or zero-inflated response within a subgroup
        of categorical predictor levels."""
        grid, wt = _grid(self.config, subgroup)
        return float(wt @ self.conditional_mean(var, grid))

    def zero_share(self, var, subgroup: dict | None = None) -> float:
        grid, wt = _grid(self.config, subgroup)
        return float(1.0 - wt @ self.nonzero_prob(var, grid))

    def level_shares(self, var, subgroup: dict | None = None) -> dict:
        grid, wt = _grid(self.config, subgroup)
        P = wt @ self.class_probs(var, grid)
        return dict(zip(self._response(var).levels, map(float, P)))

    def to_dict(self) -> dict:
        out = {"config": self.config.to_dict(), "moments": {}}
        for r in self.config.responses:
            if r.link in ("linear", "zero_inflated"):
                m = {"mean": self.mean(r.name)}
                if r.link == "zero_inflated":
                    m["zero_share"] = self.zero_share(r.name)
                out["moments"][r.name] = m
            elif r.link == "logistic":
                out["moments"][r.name] = {"level_shares": self.level_shares(r.name)}
        return out


# -- generation --------------------------------------------------------------------------


def _draw_predictors(config: SynthConfig, n: int, rng) -> pd.DataFrame:
    out = {}
    for name in config.continuous:
        out[name] = rng.standard_normal(n)
    for name, probs in config.categorical.items():
        levels = list(probs)
        out[name] = np.array(levels, dtype=object)[rng.choice(len(levels), size=n, p=list(probs.values()))]
    return pd.DataFrame(out)


def _draw_responses(config: SynthConfig, X: pd.DataFrame, rng) -> pd.DataFrame:
    n = len(X)
    out = {}
    for r in config.responses:
        if r.link == "linear":
            out[r.name] = r.lin.evaluate(X) + r.noise * rng.standard_normal(n)
        elif r.link == "logistic":
            S = np.column_stack([r.class_score(lv, X) for lv in r.levels])
            P = special.softmax(S, axis=1)
            u = rng.random(n)
            idx = np.minimum((np.cumsum(P, axis=1) <= u[:, None]).sum(axis=1), len(r.levels) - 1)
            out[r.name] = np.array(r.levels, dtype=object)[idx]
        elif r.link == "zero_inflated":
            nz = rng.random(n) < special.expit(r.zero.evaluate(X))
            mag = np.exp(r.lin.evaluate(X) + r.noise * rng.standard_normal(n))
            out[r.name] = np.where(nz, mag, 0.0)
        else:
            S = np.column_stack([r.class_score(lv, X) for lv in r.levels])
            S = S + r.noise * rng.standard_normal(S.shape)
            P = special.softmax(S, axis=1)
            # make components sum to exactly 1 in floating point
            P[:, -1] = 1.0 - P[:, :-1].sum(axis=1)
            for j, col in enumerate(r.columns):
                out[col] = P[:, j]
    return pd.DataFrame(out, index=X.index)


def _weights(config: SynthConfig, n: int, rng) -> np.ndarray:
    base = config.population / n
    if config.weights == "uniform":
        return np.full(n, base)
    k = config.weight_shape
    return base * rng.gamma(k, 1.0 / k, size=n)


def _replicates(config: SynthConfig, w: np.ndarray, rng) -> np.ndarray:
    """Replicate weights ``w (1 + s h)`` with independent random signs ``h``."""
    h = rng.choice([-1.0, 1.0], size=(w.size, config.n_replicates))
    return w[:, None] * (1.0 + config.replicate_scale * h)


def generate_population(config: SynthConfig):
    """Draw a finite population and disjoint donor and recipient samples.

    Returns ``(donor, recipient, truth)``. The donor carries the fusion
    variables; the recipient carries replicate weights instead, and its
    realised (hidden) fusion values are kept on ``truth.recipient_values``.
    """
    rng = np.random.default_rng(config.seed)
    X = _draw_predictors(config, config.population, rng)
    Z = _draw_responses(config, X, rng)
    order = rng.permutation(config.population)
    d_idx = np.sort(order[:config.n_donor])
    r_idx = np.sort(order[config.n_donor:config.n_donor + config.n_recipient])

    pred_schema = [ColumnSpec(c, "continuous", "predictor") for c in config.continuous]
    pred_schema += [ColumnSpec(c, "categorical", "predictor", tuple(config.categorical[c]))
                    for c in config.categorical]
    fusion_schema = []
    for r in config.responses:
        for col in r.columns:
            fusion_schema.append(ColumnSpec(col, r.kind, "fusion", r.levels if r.kind == "categorical" else ()))

    dfr = pd.DataFrame({"id": d_idx, "weight": _weights(config, config.n_donor, rng)})
    dfr = pd.concat([dfr, X.iloc[d_idx].reset_index(drop=True), Z.iloc[d_idx].reset_index(drop=True)], axis=1)
    donor = Microdata.from_frame(
        dfr, [ColumnSpec("id", "continuous", "id"), ColumnSpec("weight", "continuous", "weight")]
        + pred_schema + fusion_schema)

    wr = _weights(config, config.n_recipient, rng)
    reps = _replicates(config, wr, rng)
    rep_names = [f"rep{j + 1}" for j in range(config.n_replicates)]
    rfr = pd.DataFrame({"id": r_idx, "weight": wr})
    rfr = pd.concat([rfr, pd.DataFrame(reps, columns=rep_names), X.iloc[r_idx].reset_index(drop=True)], axis=1)
    recipient = Microdata.from_frame(
        rfr, [ColumnSpec("id", "continuous", "id"), ColumnSpec("weight", "continuous", "weight")]
        + [ColumnSpec(c, "continuous", "replicate_weight") for c in rep_names] + pred_schema)
    hidden = Z.iloc[r_idx].reset_index(drop=True)
    hidden.insert(0, "id", r_idx)
    return donor, recipient, Truth(config, hidden)


def fusion_steps(config: SynthConfig) -> list:
    """Default chain: one step per response, shares as a block."""
    return [r.columns if r.link == "shares" else [r.name] for r in config.responses]


def write_population(config: SynthConfig, out_dir) -> dict:
    """Write donor/recipient CSVs with schema sidecars and a truth manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    donor, recipient, truth = generate_population(config)
    write_microdata(donor, out / "donor.csv")
    write_microdata(recipient, out / "recipient.csv")
    truth.recipient_values.to_csv(out / "recipient_truth.csv", index=False, float_format="%.17g")
    manifest = truth.to_dict()
    manifest["steps"] = fusion_steps(config)
    manifest["predictors"] = config.predictors
    with open(out / "truth.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


# -- scoring -----------------------------------------------------------------------------


def _subgroups(config: SynthConfig, by) -> list:
    if not by:
        return [{}]
    levels = [list(config.categorical[b]) for b in by]
    return [dict(zip(by, combo)) for combo in itertools.product(*levels)]


def score_recovery(implicates, recipient: Microdata, truth: Truth, by=(("region",), ("tenure",),
                   ("region", "tenure")), confidence: float = 0.90,
                   use_replicate_weights: bool = False) -> pd.DataFrame:
    """Compare pooled fused estimates with population truth.

    One row per (variable, statistic, subgroup): the pooled point estimate,
    MOE, truth, absolute and relative error, whether the MOE covers the
    truth, and the subgroup size. ``by`` lists the subgroup variable sets;
    the full sample is always included. Block variables are scored by the
    joint-frequency error of their records against the recipient's hidden
    values (rows with ``statistic == "joint_frequency"``).
    """
    config = truth.config
    rows = []
    by_sets = [()] + [tuple(b) for b in by]
    for r in config.responses:
        if r.link == "shares":
            rows.append(_block_score(implicates, truth, r))
            continue
        for b in by_sets:
            if r.link == "logistic":
                req = AnalysisRequest("proportion", r.name, b, use_replicate_weights, confidence)
            else:
                req = AnalysisRequest("mean", r.name, b, use_replicate_weights, confidence)
            est = estimate(implicates, recipient, req)
            for _, e in est.iterrows():
                sub = {k: e[k] for k in b}
                if r.link == "logistic":
                    t = truth.level_shares(r.name, sub)[e["level"]]
                    stat = f"share:{e['level']}"
                else:
                    t = truth.mean(r.name, sub)
                    stat = "mean"
                rows.append(_row(r.name, stat, sub, e, t))
            if r.link == "zero_inflated":
                zero = _zero_indicator(implicates, r.name)
                req = AnalysisRequest("proportion", r.name, b, use_replicate_weights, confidence)
                est = estimate(zero, recipient, req)
                for _, e in est[est["level"] == "zero"].iterrows():
                    sub = {k: e[k] for k in b}
                    rows.append(_row(r.name, "zero_share", sub, e, truth.zero_share(r.name, sub)))
    return pd.DataFrame(rows)


def _row(var, stat, sub, e, t) -> dict:
    point = float(e["point"])
    moe = float(e["moe"])
    return {
        "variable": var, "statistic": stat,
        "subgroup": ",".join(f"{k}={v}" for k, v in sub.items()) or "all",
        "n": float(e["n"]), "point": point, "moe": moe, "truth": t,
        "abs_error": abs(point - t),
        "rel_error": abs(point - t) / abs(t) if t != 0 else np.nan,
        "covered": bool(abs(point - t) <= moe),
    }


def _zero_indicator(implicates, var):
    from .pipeline import ImplicateSet

    f = implicates.frame[[implicates.id_name, "implicate"]].copy()
    f[var] = pd.Categorical(np.where(implicates.frame[var].to_numpy() == 0, "zero", "nonzero"),
                            categories=["zero", "nonzero"])
    return ImplicateSet(f, implicates.id_name, [var], implicates.M)


def _block_score(implicates, truth: Truth, r: Response) -> dict:
    """Total-variation distance between fused and hidden joint distributions
    of the block's components, binned at their quartiles."""
    cols = r.columns
    hidden = truth.recipient_values[cols].to_numpy()
    edges = [np.quantile(hidden[:, j], [0.25, 0.5, 0.75]) for j in range(len(cols))]

    def cells(V):
        codes = np.column_stack([np.searchsorted(edges[j], V[:, j]) for j in range(len(cols))])
        key = codes @ (4 ** np.arange(len(cols)))
        return np.bincount(key, minlength=4 ** len(cols)) / len(key)

    fused = implicates.frame[cols].to_numpy(dtype=np.float64)
    tv = 0.5 * float(np.abs(cells(fused) - cells(hidden)).sum())
    return {"variable": r.name, "statistic": "joint_frequency", "subgroup": "all",
            "n": float(len(hidden)), "point": tv, "moe": np.nan, "truth": 0.0,
            "abs_error": tv, "rel_error": np.nan, "covered": np.nan}
