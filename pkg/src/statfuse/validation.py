"""Internal validation: fuse back onto the donor and compare subset estimates.

For every subset of the donor defined by level combinations of a few
predictors, the observed (donor) estimate of each fusion variable is
compared with the pooled estimate from implicates simulated for the same
rows. Three metrics are tracked against subset size: absolute percent
error, value-added relative to the naive full-sample mean, and the ratio of
simulated to observed margin of error.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .analysis import pool_rubin
from .microdata import Microdata
from .pipeline import FusionBundle, fuse

log = logging.getLogger(__name__)

METRICS = ("abs_pct_error", "value_added", "moe_ratio")
MAX_SUBSETS = 1_000_000
ZERO_DENOM = 1e-9
N_QUANTILE_BINS = 5


@dataclass
class ValidationCurve:
    metric: str
    n: np.ndarray
    value: np.ndarray
    smooth_n: np.ndarray
    smooth_value: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        pts = pd.DataFrame({"n": self.n, "value": self.value}).sort_values("n", kind="stable")
        sm = pd.DataFrame({"n": self.smooth_n, "smoothed": self.smooth_value})
        return pts.merge(sm, on="n", how="left")


def value_added(y_s, y_o, grand_mean):
    """``max(0, 1 - |y_s - y_o| / |E(y_o) - y_o|)``, elementwise.

    Where the naive error ``|E(y_o) - y_o|`` is zero, V is 1 for an exact
    simulated estimate and 0 otherwise.
    """
    y_s, y_o, g = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (y_s, y_o, grand_mean)))
    num = np.abs(y_s - y_o)
    den = np.abs(g - y_o)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.maximum(0.0, 1.0 - num / den)
    v = np.where(den == 0, np.where(num == 0, 1.0, 0.0), v)
    return float(v) if v.ndim == 0 else v


def abs_pct_error(y_s, y_o):
    """``|y_s - y_o| / |y_o|``; NaN where ``|y_o|`` is effectively zero."""
    y_s = np.asarray(y_s, dtype=np.float64)
    y_o = np.asarray(y_o, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.abs(y_s - y_o) / np.abs(y_o)
    return np.where(np.abs(y_o) < ZERO_DENOM, np.nan, out)


def median_smooth(n, values, window_frac: float = 0.1):
    """Running median over a rank window, evaluated at each distinct ``n``.

    Points are ranked by ``n``; the window holds ``max(5, ceil(window_frac *
    len))`` consecutive ranks centred on the ranks sharing a given ``n``
    and is shifted inward at the ends. Returns ``(distinct_n, smoothed)``.
    """
    n = np.asarray(n, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(n) & np.isfinite(v)
    n, v = n[ok], v[ok]
    if n.size < 5:
        raise ValueError("median smoothing needs at least 5 points")
    order = np.lexsort((v, n))
    n, v = n[order], v[order]
    N = n.size
    width = min(N, max(5, int(math.ceil(window_frac * N))))
    un, first, counts = np.unique(n, return_index=True, return_counts=True)
    centre = first + (counts - 1) / 2.0
    lo = np.clip(np.round(centre - (width - 1) / 2.0).astype(np.int64), 0, N - width)
    out = np.array([np.median(v[a:a + width]) for a in lo])
    return un, out


# -- cells -------------------------------------------------------------------------------


def _subset_columns(donor: Microdata, subset_vars) -> dict:
    """Integer codes and labels for each subset variable; continuous ones are
    cut at weighted-free quintiles."""
    out = {}
    for name in subset_vars:
        if not donor.has(name):
            raise KeyError(f"unknown subset variable {name!r}")
        spec = donor.spec(name)
        if spec.role != "predictor":
            raise ValueError(f"subset variable {name!r} must be a donor predictor")
        if spec.is_categorical:
            codes = donor.values(name).astype(np.int64)
            labels = list(spec.levels)
        else:
            x = donor.values(name)
            edges = np.unique(np.quantile(x, np.linspace(0, 1, N_QUANTILE_BINS + 1)[1:-1]))
            codes = np.searchsorted(edges, x, side="right").astype(np.int64)
            bounds = np.concatenate([[-np.inf], edges, [np.inf]])
            labels = [f"({bounds[i]:.6g},{bounds[i + 1]:.6g}]" for i in range(edges.size + 1)]
        out[name] = (codes, labels)
    return out


def _n_subsets(cols: dict) -> int:
    total = 1
    for codes, labels in cols.values():
        total *= len(labels) + 1
    return total


def _group_stats(codes, n_groups, y, w):
    """Weighted mean and its standard error per group, plus counts."""
    sw = np.bincount(codes, w, n_groups)
    cnt = np.bincount(codes, minlength=n_groups)
    mean = np.bincount(codes, w * y, n_groups) / np.where(sw > 0, sw, 1.0)
    r = y - mean[codes]
    ss = np.bincount(codes, (w * r) ** 2, n_groups)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.sqrt(cnt / (cnt - 1.0) * ss / sw**2)
    se = np.where(cnt > 1, se, np.nan)
    return mean, se, cnt


def _group_prop(codes, n_groups, x, w):
    sw = np.bincount(codes, w, n_groups)
    sw2 = np.bincount(codes, w * w, n_groups)
    cnt = np.bincount(codes, minlength=n_groups)
    p = np.bincount(codes, w * x, n_groups) / np.where(sw > 0, sw, 1.0)
    neff = sw**2 / np.where(sw2 > 0, sw2, 1.0)
    return p, np.sqrt(p * (1.0 - p) / neff), cnt


def _targets(bundle: FusionBundle, donor: Microdata):
    """(variable, statistic, label, observed array, kind, level) per validated quantity."""
    out = []
    for st in bundle.steps:
        for v in st.variables:
            kind = st.kinds[v]
            if kind == "categorical":
                for j, lv in enumerate(st.levels[v]):
                    out.append((v, "proportion", lv, j, "categorical"))
            else:
                out.append((v, "mean", "", None, kind))
                if kind == "semicontinuous":
                    out.append((v, "zero_share", "", None, kind))
    return out


def _indicator(values, stat, level_code, kind):
    if stat == "proportion":
        return (np.asarray(values) == level_code).astype(np.float64)
    if stat == "zero_share":
        return (np.asarray(values, dtype=np.float64) == 0).astype(np.float64)
    return np.asarray(values, dtype=np.float64)


def internal_validate(bundle: FusionBundle, donor: Microdata, subset_vars, M: int = 40,
                      seed: int | None = None, confidence: float = 0.90,
                      implicates=None) -> pd.DataFrame:
    """Validation cells for every level combination of every non-empty subset
    of ``subset_vars``, plus the full sample.

    The fusion variables are removed from the donor, simulated again for
    the same rows (``M`` implicates) and compared with the observed values.
    Continuous subset variables are binned into quintiles. Returns one row
    per (subset, fusion quantity) with observed and pooled simulated
    estimates, margins of error and the three validation metrics.
    """
    subset_vars = list(subset_vars)
    variables = bundle.spec.fusion_variables
    if not variables:
        raise ValueError("bundle has no fusion variables")
    cols = _subset_columns(donor, subset_vars)
    if _n_subsets(cols) > MAX_SUBSETS:
        raise ValueError(f"more than {MAX_SUBSETS} potential subsets; use fewer subset variables")
    if implicates is None:
        recipient = donor.drop([v for v in variables if donor.has(v)])
        implicates = fuse(bundle, recipient, M=M, seed=seed)
    M = implicates.M
    w = donor.weights
    n = donor.n
    targets = _targets(bundle, donor)
    sims = {}
    for m in range(1, M + 1):
        imp = implicates.implicate(m)
        if len(imp) != n:
            raise ValueError(f"implicate {m} has {len(imp)} rows, donor has {n}")
        sims[m] = imp
    z_obs = stats.norm.ppf(0.5 + confidence / 2.0)

    def codes_of(frame_col, var):
        s = frame_col
        if isinstance(s.dtype, pd.CategoricalDtype):
            return s.cat.codes.to_numpy()
        return s.to_numpy()

    obs = {v: donor.values(v) for v in variables}
    sim = {v: [codes_of(sims[m][v], v) for m in range(1, M + 1)] for v in variables}
    grand = {}
    for var, stat, label, code, kind in targets:
        x = _indicator(obs[var], stat, code, kind)
        grand[(var, stat, label)] = float(np.dot(w, x) / w.sum())

    rows = []
    subsets = [()]
    for r in range(1, len(subset_vars) + 1):
        subsets.extend(itertools.combinations(subset_vars, r))
    for sub in subsets:
        if sub:
            radix = [len(cols[s][1]) for s in sub]
            key = np.zeros(n, dtype=np.int64)
            for s, base in zip(sub, radix):
                key = key * base + cols[s][0]
            uniq, g = np.unique(key, return_inverse=True)
        else:
            uniq, g = np.zeros(1, dtype=np.int64), np.zeros(n, dtype=np.int64)
        G = uniq.size
        labels = []
        for k in uniq:
            parts = []
            rem = int(k)
            for s in reversed(sub):
                base = len(cols[s][1])
                parts.append(f"{s}={cols[s][1][rem % base]}")
                rem //= base
            labels.append(",".join(reversed(parts)) or "all")
        for var, stat, label, code, kind in targets:
            x = _indicator(obs[var], stat, code, kind)
            fn = _group_stats if stat == "mean" else _group_prop
            yo, so, cnt = fn(g, G, x, w)
            est = np.empty((M, G))
            se = np.empty((M, G))
            for m in range(M):
                xs = _indicator(sim[var][m], stat, code, kind)
                est[m], se[m], _ = fn(g, G, xs, w)
            for j in range(G):
                s_j = np.where(np.isfinite(se[:, j]), se[:, j], 0.0)
                with np.errstate(all="ignore"):
                    pooled = pool_rubin(est[:, j], s_j, confidence) if M > 1 else None
                ys = float(est[:, j].mean())
                moe_s = pooled.moe if pooled is not None else float(z_obs * s_j[0])
                moe_o = float(z_obs * so[j]) if np.isfinite(so[j]) else np.nan
                rows.append({
                    "variable": var, "statistic": stat, "level": label,
                    "subset_vars": ",".join(sub), "subset": labels[j], "n": int(cnt[j]),
                    "y_o": float(yo[j]), "y_s": ys, "moe_o": moe_o, "moe_s": float(moe_s),
                    "grand_mean": grand[(var, stat, label)],
                })
    cells = pd.DataFrame(rows)
    cells["abs_pct_error"] = abs_pct_error(cells["y_s"], cells["y_o"])
    cells["value_added"] = value_added(cells["y_s"], cells["y_o"], cells["grand_mean"])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = cells["moe_s"] / cells["moe_o"]
    cells["moe_ratio"] = np.where(cells["moe_o"] > 0, ratio, np.nan)
    excluded = int(cells["abs_pct_error"].isna().sum())
    if excluded:
        log.info("event=zero_denominator cells=%d", excluded)
    return cells


def validation_curves(cells: pd.DataFrame, window_frac: float = 0.1, variables=None) -> dict:
    """Median-smoothed metric curves over subset size."""
    if variables is not None:
        cells = cells[cells["variable"].isin(list(variables))]
    out = {}
    for metric in METRICS:
        sub = cells[["n", metric]].dropna()
        if len(sub) < 5:
            continue
        sn, sv = median_smooth(sub["n"], sub[metric], window_frac)
        out[metric] = ValidationCurve(metric, sub["n"].to_numpy(), sub[metric].to_numpy(), sn, sv)
    return out


def emit_report(cells: pd.DataFrame, curves: dict, out_dir) -> list:
    """Write ``cells.csv``, one CSV and one SVG plot per metric curve.

    The x-axis is the rank of subset size, labelled with sizes, which gives
    small subsets room on the plot.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if cells is None or len(cells) == 0:
        raise ValueError("no validation cells to report")
    if not curves:
        raise ValueError("no curves to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "cells.csv"]
    cells.to_csv(files[0], index=False, float_format="%.10g")
    titles = {"abs_pct_error": "absolute percent error", "value_added": "value-added",
              "moe_ratio": "MOE ratio (simulated / observed)"}
    for metric, curve in curves.items():
        table = out / f"{metric}.csv"
        curve.to_frame().to_csv(table, index=False, float_format="%.10g")
        all_n = np.sort(np.unique(np.concatenate([curve.n, curve.smooth_n])))
        rank = {v: i for i, v in enumerate(all_n)}
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.scatter([rank[v] for v in curve.n], curve.value, s=4, alpha=0.3, color="grey")
        ax.plot([rank[v] for v in curve.smooth_n], curve.smooth_value, color="black")
        ticks = np.unique(np.linspace(0, all_n.size - 1, min(8, all_n.size)).astype(int))
        ax.set_xticks(ticks)
        ax.set_xticklabels([f"{all_n[t]:.0f}" for t in ticks])
        ax.set_xlabel("subset size (rank scale)")
        ax.set_ylabel(titles.get(metric, metric))
        fig.tight_layout()
        plot = out / f"{metric}.svg"
        fig.savefig(plot, format="svg", metadata={"Date": None})
        plt.close(fig)
        files += [table, plot]
    return files
