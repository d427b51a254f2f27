"""Pooled estimation over implicates.

Each implicate is analysed as if it were complete data; per-implicate
estimates and standard errors are then combined with Rubin's rules.
Replicate weights, when present, add a design-variance term.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

log = logging.getLogger(__name__)

STATISTICS = ("mean", "proportion", "sum", "count", "median")
REPLICATE_FACTOR = 4.0
MEDIAN_MIN_N = 100
MEDIAN_MIN_DISTINCT = 20
BOOTSTRAP_REPS = 200
NORMAL_DF = 1e4


# -- single-sample estimators ---------------------------------------------------------------


def weighted_mean_se(values, weights):
    """Weighted mean with the ratio-estimator (Cochran) standard error.

    The variance is
    ``n / ((n - 1) (sum w)^2) * sum[(w y - wbar ybar)^2 - 2 ybar (w - wbar)(w y - wbar ybar)
    + ybar^2 (w - wbar)^2]``, which collapses to
    ``n / ((n - 1) (sum w)^2) * sum w^2 (y - ybar)^2``. With fewer than two
    observations the SE is NaN.
    """
    y = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n = y.size
    sw = w.sum()
    if n == 0 or sw <= 0:
        return float("nan"), float("nan")
    ybar = float(np.dot(w, y) / sw)
    if n < 2:
        return ybar, float("nan")
    var = n / ((n - 1) * sw * sw) * float(np.sum((w * (y - ybar)) ** 2))
    return ybar, float(np.sqrt(var))


def effective_n(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    return float(w.sum() ** 2 / np.sum(w * w))


def proportion_se(indicator, weights):
    """Weighted share with SE ``sqrt(p (1 - p) / n_eff)``, Kish effective size."""
    x = np.asarray(indicator, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.size == 0 or w.sum() <= 0:
        return float("nan"), float("nan")
    if np.any((x != 0) & (x != 1)):
        raise ValueError("proportion needs 0/1 indicator values")
    p = float(np.dot(w, x) / w.sum())
    return p, float(np.sqrt(p * (1.0 - p) / effective_n(w)))


def weighted_median(values, weights) -> float:
    """Smallest value whose cumulative weight share reaches one half."""
    y = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    order = np.argsort(y, kind="stable")
    cw = np.cumsum(w[order])
    i = int(np.searchsorted(cw, 0.5 * cw[-1], side="left"))
    return float(y[order][min(i, y.size - 1)])


def median_se(values, weights, n_boot: int = BOOTSTRAP_REPS, seed: int = 0):
    """Weighted median and its SE.

    Large samples (n >= 100 with at least 20 distinct values) use
    ``1 / (2 f(m) sqrt(n_eff))`` with ``f`` a weighted Gaussian kernel
    density at the median; otherwise a weighted bootstrap. Returns
    ``(estimate, se, method)`` with method ``"kde"``, ``"bootstrap"`` or
    ``"constant"``.
    """
    y = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if y.size < 2:
        return (float(y[0]) if y.size else float("nan")), float("nan"), "undefined"
    m = weighted_median(y, w)
    distinct = np.unique(y).size
    if distinct == 1:
        return m, 0.0, "constant"
    if y.size >= MEDIAN_MIN_N and distinct >= MEDIAN_MIN_DISTINCT:
        f = float(stats.gaussian_kde(y, weights=w)(m)[0])
        if f > 0:
            return m, 1.0 / (2.0 * f * np.sqrt(effective_n(w))), "kde"
    rng = np.random.default_rng(seed)
    reps = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, y.size, size=y.size)
        reps[b] = weighted_median(y[idx], w[idx])
    return m, float(np.std(reps, ddof=1)), "bootstrap"


# -- pooling ---------------------------------------------------------------------------


@dataclass
class PooledEstimate:
    key: tuple
    point: float
    within_var: float
    between_var: float
    total_var: float
    replicate_var: float
    moe: float
    df: float
    M: int
    flags: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {"point": self.point, "moe": self.moe, "within_var": self.within_var,
                "between_var": self.between_var, "replicate_var": self.replicate_var,
                "total_var": self.total_var, "df": self.df, "M": self.M,
                "flags": ";".join(self.flags)}


def _critical(confidence: float, df: float) -> float:
    q = 0.5 + confidence / 2.0
    if not np.isfinite(df) or df > NORMAL_DF:
        return float(stats.norm.ppf(q))
    return float(stats.t.ppf(q, df))


def pool_rubin(estimates, ses, confidence: float = 0.90, replicate_var: float = 0.0,
               key=()) -> PooledEstimate:
    """Combine per-implicate estimates with Rubin's rules.

    ``T = W + (1 + 1/M) B + V_add`` with W the mean squared SE and B the
    between-implicate variance. The MOE uses a t quantile with Rubin's
    degrees of freedom, or the normal quantile when B is zero.
    """
    q = np.asarray(estimates, dtype=np.float64)
    se = np.asarray(ses, dtype=np.float64)
    M = q.size
    if M == 0:
        raise ValueError("no estimates to pool")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    flags = []
    point = float(q.mean())
    W = float(np.mean(se**2))
    vadd = max(float(replicate_var), 0.0)
    if M == 1:
        warnings.warn("a single implicate cannot be pooled; between-implicate variance set to 0")
        flags.append("unpooled")
        B = 0.0
    else:
        B = float(np.var(q, ddof=1))
    T = W + (1.0 + 1.0 / M) * B + vadd
    if B > 0 and M > 1:
        df = (M - 1) * (1.0 + M * W / ((M + 1) * B)) ** 2
    else:
        df = float("inf")
    moe = _critical(confidence, df) * np.sqrt(T) if T > 0 else 0.0
    return PooledEstimate(tuple(key), point, W, B, T, vadd, float(moe), float(df), M, flags)


def replicate_weight_variance(primary, replicate, factor: float = REPLICATE_FACTOR) -> float:
    """``factor * mean((theta_rep - theta)^2)`` over implicates.

    Implicate ``m`` contributes one estimate computed with its assigned
    replicate-weight column. Pairs with a missing replicate estimate are
    skipped.
    """
    a = np.asarray(primary, dtype=np.float64)
    b = np.asarray(replicate, dtype=np.float64)
    ok = np.isfinite(a) & np.isfinite(b)
    if not ok.any():
        return 0.0
    return float(factor * np.mean((b[ok] - a[ok]) ** 2))


# -- request-level estimation --------------------------------------------------------------


@dataclass
class AnalysisRequest:
    statistic: str
    target: str
    by: tuple = ()
    use_replicate_weights: bool = False
    confidence: float = 0.90
    replicate_factor: float = REPLICATE_FACTOR

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        self.by = tuple(self.by)


def _stat(statistic, y, w, is_cat, level):
    """(estimate, se, note) for one group of one implicate."""
    if statistic in ("proportion", "count"):
        x = (y == level).astype(np.float64) if is_cat else np.asarray(y, dtype=np.float64)
        p, se = proportion_se(x, w)
        if p in (0.0, 1.0):
            note = "boundary"
        else:
            note = ""
        if statistic == "count":
            return p * w.sum(), se * w.sum(), note
        return p, se, note
    y = np.asarray(y, dtype=np.float64)
    if statistic == "median":
        m, se, method = median_se(y, w)
        return m, se, method
    est, se = weighted_mean_se(y, w)
    if statistic == "sum":
        return est * w.sum(), se * w.sum(), ""
    return est, se, ""


def _point(statistic, y, w, is_cat, level):
    if w.sum() <= 0:
        return float("nan")
    if statistic in ("proportion", "count"):
        x = (y == level) if is_cat else np.asarray(y, dtype=bool)
        p = float(np.dot(w, x) / w.sum())
        return p * w.sum() if statistic == "count" else p
    y = np.asarray(y, dtype=np.float64)
    if statistic == "median":
        return weighted_median(y, w)
    m = float(np.dot(w, y) / w.sum())
    return m * w.sum() if statistic == "sum" else m


def estimate(implicates, recipient, request: AnalysisRequest) -> pd.DataFrame:
    """Pooled estimates of ``request`` for every subgroup.

    Subgroups are all observed combinations of the ``by`` variables (which
    may be recipient columns or fused columns). Proportions and counts of
    a categorical target produce one row per level. A subgroup empty in any
    implicate is flagged and its estimate suppressed.
    """
    from .microdata import Microdata  # local: avoids a cycle at import time

    if not isinstance(recipient, Microdata):
        raise TypeError("recipient must be Microdata")
    M = implicates.M
    fused = set(implicates.variables)
    tgt = request.target
    if tgt not in fused and not recipient.has(tgt):
        raise KeyError(f"unknown target {tgt!r}")
    for b in request.by:
        if b not in fused and not recipient.has(b):
            raise KeyError(f"unknown subgroup variable {b!r}")
    w = recipient.weights
    reps = recipient.replicate_weights if request.use_replicate_weights else None
    if request.use_replicate_weights and reps is None:
        warnings.warn("replicate weights requested but the recipient has none; V_add = 0")

    frames = []
    for m in range(1, M + 1):
        imp = implicates.implicate(m)
        if len(imp) != recipient.n:
            raise ValueError(f"implicate {m} has {len(imp)} rows, recipient has {recipient.n}")
        df = pd.DataFrame(index=range(recipient.n))
        for col in set((tgt,) + request.by):
            src = imp[col] if col in fused else recipient.frame[col]
            df[col] = np.asarray(src.astype(str) if _is_categorical(src) else src)
        frames.append(df)

    is_cat = _is_categorical(frames[0][tgt]) or frames[0][tgt].dtype == object
    if request.statistic in ("proportion", "count") and not is_cat:
        vals = np.unique(np.concatenate([f[tgt].to_numpy() for f in frames]))
        if not np.all(np.isin(vals, [0, 1])):
            raise ValueError("proportion/count targets must be categorical or 0/1")
    if request.statistic in ("mean", "sum", "median") and is_cat:
        raise ValueError(f"{request.statistic} needs a numeric target")
    levels = [None]
    if is_cat and request.statistic in ("proportion", "count"):
        levels = _levels_for(tgt, implicates, recipient, frames)

    keys = _group_keys(frames, request.by)
    rows = []
    for key in keys:
        masks = [_mask(f, request.by, key) for f in frames]
        for level in levels:
            est, se, notes, rep_est = [], [], set(), []
            empty = False
            for m, (f, mask) in enumerate(zip(frames, masks)):
                if not mask.any():
                    empty = True
                    break
                y = f[tgt].to_numpy()[mask]
                e, s, note = _stat(request.statistic, y, w[mask], is_cat, level)
                est.append(e)
                se.append(s)
                if note:
                    notes.add(note)
                if reps is not None:
                    col = reps[mask, m % reps.shape[1]]
                    rep_est.append(_point(request.statistic, y, col, is_cat, level))
            row = dict(zip(request.by, key))
            if level is not None:
                row["level"] = level
            row["statistic"] = request.statistic
            if empty:
                row.update({"point": np.nan, "moe": np.nan, "suppressed": True, "n": 0,
                            "flags": "empty_subgroup"})
                rows.append(row)
                continue
            vadd = replicate_weight_variance(est, rep_est, request.replicate_factor) if rep_est else 0.0
            se_arr = np.asarray(se, dtype=np.float64)
            flags = sorted(notes)
            if np.any(~np.isfinite(se_arr)):
                flags.append("se_undefined")
                se_arr = np.where(np.isfinite(se_arr), se_arr, 0.0)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                pooled = pool_rubin(est, se_arr, request.confidence, vadd, key)
            row.update(pooled.as_row())
            row["flags"] = ";".join(flags + pooled.flags)
            row["suppressed"] = False
            row["n"] = float(np.mean([mk.sum() for mk in masks]))
            rows.append(row)
    return pd.DataFrame(rows)


def _is_categorical(s) -> bool:
    return isinstance(getattr(s, "dtype", None), pd.CategoricalDtype)


def _levels_for(tgt, implicates, recipient, frames) -> list:
    if recipient.has(tgt) and recipient.spec(tgt).is_categorical:
        return list(recipient.spec(tgt).levels)
    col = implicates.frame[tgt]
    if _is_categorical(col):
        return [str(c) for c in col.cat.categories]
    return sorted(set(np.concatenate([f[tgt].astype(str).to_numpy() for f in frames])))


def _group_keys(frames, by) -> list:
    if not by:
        return [()]
    seen = set()
    for f in frames:
        seen.update(map(tuple, f[list(by)].drop_duplicates().itertuples(index=False, name=None)))
    return sorted(seen, key=lambda k: tuple(str(x) for x in k))


def _mask(frame, by, key) -> np.ndarray:
    mask = np.ones(len(frame), dtype=bool)
    for b, v in zip(by, key):
        mask &= frame[b].to_numpy() == v
    return mask

