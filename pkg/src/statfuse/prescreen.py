"""Predictor screening with L1-penalised linear model paths.

For each fusion variable a LASSO path is fitted over all candidate
predictors; the retained predictors are the support of the first (largest
lambda) model reaching ``threshold`` times the deviance explained at the
end of the path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba as nb
import numpy as np
import pandas as pd
from scipy import stats

log = logging.getLogger(__name__)

N_LAMBDA = 100
LAMBDA_MIN_RATIO = 1e-3
# default paths end early once the fit saturates or stops improving
PATH_STOP_RATIO = 0.999
PATH_STOP_CHANGE = 1e-5
FAMILIES = ("gaussian", "binomial", "multinomial")


@dataclass
class LassoPath:
    family: str
    lambdas: np.ndarray
    coefs: np.ndarray  # (n_lambda, p) or (n_lambda, p, v) for multinomial
    deviance_explained: np.ndarray
    column_names: list
    parents: list  # predictor name owning each column
    n_eff: float = float("nan")
    null_deviance: float = float("nan")  # per unit weight; logistic families only
    n_classes: int = 1

    def support(self, i: int) -> list:
        c = self.coefs[i]
        active = np.abs(c).sum(axis=1) > 0 if c.ndim == 2 else c != 0
        return [self.column_names[j] for j in np.flatnonzero(active)]


@dataclass
class ScreenResult:
    selected: list
    deviance: float = 0.0
    full_deviance: float = 0.0
    null_model: bool = False
    forced: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "deviance": float(self.deviance),
            "full_deviance": float(self.full_deviance),
            "null_model": bool(self.null_model),
            "forced": list(self.forced),
        }


# -- design matrix -------------------------------------------------------------------


def design_matrix(frame: pd.DataFrame, predictors, weights):
    """Indicator-expand categoricals and standardise with weights.

    Constant columns are dropped. Returns ``(Z, column_names, parents)``.
    """
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    cols, names, parents = [], [], []
    for p in predictors:
        s = frame[p]
        if isinstance(s.dtype, pd.CategoricalDtype):
            codes = s.cat.codes.to_numpy()
            for k, lv in enumerate(s.cat.categories):
                cols.append((codes == k).astype(np.float64))
                names.append(f"{p}={lv}")
                parents.append(p)
        else:
            cols.append(np.asarray(s, dtype=np.float64))
            names.append(p)
            parents.append(p)
    if not cols:
        return np.zeros((len(frame), 0)), [], []
    X = np.column_stack(cols)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite predictor values")
    mu = w @ X
    sd = np.sqrt(w @ (X - mu) ** 2)
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    Z = (X[:, keep] - mu[keep]) / sd[keep]
    names = [n for n, k in zip(names, keep) if k]
    parents = [p for p, k in zip(parents, keep) if k]
    return np.ascontiguousarray(Z), names, parents


# -- coordinate descent kernels --------------------------------------------------------


@nb.njit(cache=True)
def _soft(z, g):
    # ties at the threshold (lambda_max) resolve to exact zero
    t = g * (1.0 + 1e-10)
    if z > t:
        return z - g
    if z < -t:
        return z + g
    return 0.0


@nb.njit(cache=True)
def _path_done(dev, li, stop_ratio, stop_change):
    """Path truncation: saturated fit or stalled deviance improvement."""
    if dev[li] >= stop_ratio:
        return True
    if li > 0 and dev[li] - dev[li - 1] < stop_change * max(dev[li], 1e-12):
        return True
    return False


@nb.njit(cache=True)
def _cd_gaussian(X, y, w, tss, lambdas, tol, max_sweeps, stop_ratio, stop_change):
    n, p = X.shape
    nl = lambdas.shape[0]
    B = np.zeros((nl, p))
    dev = np.zeros(nl)
    beta = np.zeros(p)
    r = y.copy()
    xsq = np.zeros(p)
    for j in range(p):
        for i in range(n):
            xsq[j] += w[i] * X[i, j] * X[i, j]
    for li in range(nl):
        lam = lambdas[li]
        for _ in range(max_sweeps):
            dmax = 0.0
            for j in range(p):
                if xsq[j] <= 0.0:
                    continue
                grad = 0.0
                for i in range(n):
                    grad += w[i] * X[i, j] * r[i]
                old = beta[j]
                new = _soft(grad + xsq[j] * old, lam) / xsq[j]
                if new != old:
                    d = new - old
                    for i in range(n):
                        r[i] -= d * X[i, j]
                    beta[j] = new
                    if xsq[j] * d * d > dmax:
                        dmax = xsq[j] * d * d
            if dmax < tol:
                break
        B[li] = beta
        rss = 0.0
        for i in range(n):
            rss += w[i] * r[i] * r[i]
        dev[li] = 1.0 - rss / tss if tss > 0.0 else 0.0
        if _path_done(dev, li, stop_ratio, stop_change):
            return B[: li + 1], dev[: li + 1]
    return B, dev


@nb.njit(cache=True)
def _probs(eta, v, out):
    n = eta.shape[0]
    if v == 1:
        for i in range(n):
            out[i, 0] = 1.0 / (1.0 + np.exp(-eta[i, 0]))
        return
    for i in range(n):
        m = eta[i, 0]
        for k in range(1, v):
            if eta[i, k] > m:
                m = eta[i, k]
        s = 0.0
        for k in range(v):
            out[i, k] = np.exp(eta[i, k] - m)
            s += out[i, k]
        for k in range(v):
            out[i, k] /= s


@nb.njit(cache=True)
def _deviance(P, Y, w):
    v = Y.shape[1]
    d = 0.0
    for i in range(Y.shape[0]):
        if v == 1:
            q = P[i, 0] if Y[i, 0] > 0.5 else 1.0 - P[i, 0]
            d -= w[i] * np.log(max(q, 1e-15))
        else:
            for k in range(v):
                if Y[i, k] > 0.0:
                    d -= w[i] * Y[i, k] * np.log(max(P[i, k], 1e-15))
    return 2.0 * d


@nb.njit(cache=True)
def _penalised(P, Y, w, beta, lam):
    pen = 0.0
    for j in range(beta.shape[0]):
        s = 0.0
        for k in range(beta.shape[1]):
            s += beta[j, k] * beta[j, k]
        pen += np.sqrt(s)
    return 0.5 * _deviance(P, Y, w) + lam * pen


@nb.njit(cache=True)
def _cd_logistic(X, Y, w, b0, dev_null, lambdas, tol, max_iter, stop_ratio, stop_change):
    """Logistic L1 path; one logit (binomial) or grouped classes (multinomial).

    Each pass refreshes the probabilities, builds the quadratic
    approximation of the log-likelihood and takes one coordinate sweep.
    Binomial passes use the exact curvature ``w p (1 - p)``; for the
    multinomial, classes share a group penalty and each group step uses
    the largest per-class curvature so the step stays a majorisation of the
    local quadratic. Passes cycle over the active set and only revisit all
    columns once the active coefficients have settled.
    """
    n, p = X.shape
    v = Y.shape[1]
    nl = lambdas.shape[0]
    B = np.zeros((nl, p, v))
    dev = np.zeros(nl)
    beta = np.zeros((p, v))
    a = b0.copy()
    eta = np.zeros((n, v))
    P = np.zeros((n, v))
    W = np.zeros((n, v))
    R = np.zeros((n, v))
    z = np.zeros(v)
    for i in range(n):
        for k in range(v):
            eta[i, k] = a[k]
    active = np.zeros(p, dtype=np.bool_)
    beta0 = np.zeros((p, v))
    a0 = np.zeros(v)
    eta0 = np.zeros((n, v))
    for li in range(nl):
        lam = lambdas[li]
        full = True
        _probs(eta, v, P)
        obj = _penalised(P, Y, w, beta, lam)
        for _it in range(max_iter):
            beta0[:, :] = beta
            a0[:] = a
            eta0[:, :] = eta
            for i in range(n):
                for k in range(v):
                    q = P[i, k] * (1.0 - P[i, k])
                    if q < 1e-5:
                        q = 1e-5
                    W[i, k] = w[i] * q
                    R[i, k] = w[i] * (Y[i, k] - P[i, k])
            dmax = 0.0
            for k in range(v):
                sw = 0.0
                sr = 0.0
                for i in range(n):
                    sw += W[i, k]
                    sr += R[i, k]
                d = sr / sw
                if d != 0.0:
                    a[k] += d
                    for i in range(n):
                        R[i, k] -= W[i, k] * d
                        eta[i, k] += d
                    if sw * d * d > dmax:
                        dmax = sw * d * d
            changed = False
            for j in range(p):
                if not (full or active[j]):
                    continue
                L = 0.0
                for k in range(v):
                    acc = 0.0
                    for i in range(n):
                        acc += W[i, k] * X[i, j] * X[i, j]
                    if acc > L:
                        L = acc
                if L <= 0.0:
                    continue
                nz = 0.0
                for k in range(v):
                    gk = 0.0
                    for i in range(n):
                        gk += X[i, j] * R[i, k]
                    z[k] = beta[j, k] + gk / L
                    nz += z[k] * z[k]
                nz = np.sqrt(nz)
                shrink = 0.0
                if L * nz > lam * (1.0 + 1e-10):
                    shrink = 1.0 - lam / (L * nz)
                if (shrink > 0.0) != active[j]:
                    changed = True
                    active[j] = shrink > 0.0
                for k in range(v):
                    d = z[k] * shrink - beta[j, k]
                    if d != 0.0:
                        for i in range(n):
                            R[i, k] -= W[i, k] * X[i, j] * d
                            eta[i, k] += X[i, j] * d
                        beta[j, k] += d
                        if L * d * d > dmax:
                            dmax = L * d * d
            # step halving keeps the penalised objective non-increasing
            _probs(eta, v, P)
            new_obj = _penalised(P, Y, w, beta, lam)
            halvings = 0
            while new_obj > obj + 1e-12 * abs(obj) and halvings < 30:
                beta[:, :] = 0.5 * (beta + beta0)
                a[:] = 0.5 * (a + a0)
                eta[:, :] = 0.5 * (eta + eta0)
                dmax *= 0.25
                _probs(eta, v, P)
                new_obj = _penalised(P, Y, w, beta, lam)
                halvings += 1
            obj = new_obj
            if dmax < tol:
                if full and not changed:
                    break
                full = True
            else:
                full = changed
        B[li] = beta
        dev[li] = 1.0 - _deviance(P, Y, w) / dev_null if dev_null > 0.0 else 0.0
        if _path_done(dev, li, stop_ratio, stop_change):
            return B[: li + 1], dev[: li + 1]
    return B, dev


def _lambda_grid(lmax, lambdas):
    if lambdas is not None:
        return np.sort(np.asarray(lambdas, dtype=np.float64))[::-1]
    if lmax <= 0:
        return np.zeros(1)
    return np.geomspace(lmax, LAMBDA_MIN_RATIO * lmax, N_LAMBDA)


def lasso_path(features, response, family: str, weights=None, lambdas=None,
               column_names=None, parents=None, tol: float = 1e-7,
               max_sweeps: int = 1000) -> LassoPath:
    """Fit an L1 path by coordinate descent.

    Parameters
    ----------
    features : ndarray (n, p)
        Standardised numeric matrix (see :func:`design_matrix`).
    response : ndarray
        Real response (gaussian), 0/1 (binomial) or class codes (multinomial).
    family : {"gaussian", "binomial", "multinomial"}
    weights : ndarray, optional
    lambdas : sequence, optional
        Overrides the default 100-value log-spaced grid from ``lambda_max``
        down to ``0.001 * lambda_max``. The default grid is truncated once
        the deviance explained exceeds 0.999 or improves by less than a
        relative 1e-5 between consecutive lambdas; an explicit grid is
        always fitted in full.
    tol : float
        Convergence threshold on the largest curvature-weighted squared
        coefficient change of a sweep.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    X = np.ascontiguousarray(features, dtype=np.float64)
    n, p = X.shape
    if n < 10:
        raise ValueError("lasso_path needs at least 10 rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    n_eff = 1.0 / float(np.sum(w**2))
    stop = (1.0, 0.0) if lambdas is not None else (PATH_STOP_RATIO, PATH_STOP_CHANGE)
    names = list(column_names) if column_names is not None else [f"x{j}" for j in range(p)]
    owners = list(parents) if parents is not None else list(names)

    if family == "gaussian":
        y = np.asarray(response, dtype=np.float64)
        yc = y - w @ y
        tss = float(w @ yc**2)
        lmax = float(np.max(np.abs(X.T @ (w * yc)))) if p else 0.0
        lam = _lambda_grid(lmax, lambdas)
        if p:
            B, dev = _cd_gaussian(X, yc, w, tss, lam, tol, max_sweeps, *stop)
        else:
            B, dev = np.zeros((1, 0)), np.zeros(1)
        return LassoPath(family, lam[: len(B)], B, dev, names, owners, n_eff)

    if family == "binomial":
        Y = np.asarray(response, dtype=np.float64).reshape(-1, 1)
    else:
        codes = np.asarray(response).astype(np.int64)
        v = int(codes.max()) + 1
        Y = np.zeros((n, v))
        Y[np.arange(n), codes] = 1.0
    ybar = np.clip(w @ Y, 1e-15, 1 - 1e-15)
    if Y.shape[1] == 1:
        b0 = np.log(ybar / (1 - ybar))
        P0 = np.tile(ybar, (n, 1))
    else:
        b0 = np.log(ybar) - np.log(ybar).mean()
        P0 = np.tile(ybar / ybar.sum(), (n, 1))
    dev_null = _deviance(P0, Y, w)
    G = X.T @ (w[:, None] * (Y - ybar))
    lmax = float(np.max(np.sqrt(np.sum(G**2, axis=1)))) if p else 0.0
    lam = _lambda_grid(lmax, lambdas)
    if p:
        B, dev = _cd_logistic(X, np.ascontiguousarray(Y), w, b0, dev_null, lam, tol,
                              max_sweeps, *stop)
    else:
        B, dev = np.zeros((1, 0, Y.shape[1])), np.zeros(1)
    if family == "binomial":
        B = B[:, :, 0]
    return LassoPath(family, lam[: len(B)], B, dev, names, owners, n_eff, dev_null, Y.shape[1])


# -- screening ------------------------------------------------------------------------


def full_model_pvalue(path: LassoPath) -> float:
    """Significance of the end-of-path model against the intercept-only model.

    F test on R^2 for gaussian paths, likelihood-ratio chi-square otherwise;
    degrees of freedom are the active coefficients at the smallest lambda and
    the sample size is the Kish effective size.
    """
    d = float(path.deviance_explained[-1])
    df = len(path.support(len(path.lambdas) - 1))
    if path.family == "multinomial":
        df *= max(path.n_classes - 1, 1)
    if df == 0 or not d > 0:
        return 1.0
    n = path.n_eff
    if path.family == "gaussian":
        dfd = n - df - 1
        if d >= 1.0:
            return 0.0
        if dfd <= 0:
            return 1.0
        return float(stats.f.sf((d / df) / ((1.0 - d) / dfd), df, dfd))
    return float(stats.chi2.sf(n * path.null_deviance * d, df))


def screen_predictors(path: LassoPath, threshold: float = 0.95, forced=(),
                      alpha: float = 0.05) -> ScreenResult:
    """Smallest-support path entry explaining ``threshold`` of the end-of-path deviance.

    Indicator columns collapse to their parent predictor. Names in ``forced``
    (earlier fusion variables in a chain) are appended unscreened. When the
    end-of-path deviance is not positive, or not significant at ``alpha``,
    the result is the null model (``null_model=True``, only forced names).
    """
    forced = list(forced)
    dstar = float(path.deviance_explained[-1]) if len(path.deviance_explained) else 0.0
    if not dstar > 0 or full_model_pvalue(path) > alpha:
        log.info("event=prescreen_null full_deviance=%s", dstar)
        return ScreenResult(selected=list(forced), full_deviance=dstar, null_model=True, forced=forced)
    target = threshold * dstar
    hits = np.flatnonzero(path.deviance_explained >= target - 1e-12 * abs(dstar))
    i = int(hits[0]) if hits.size else len(path.lambdas) - 1
    cols = set(path.support(i))
    owner = dict(zip(path.column_names, path.parents))
    selected = []
    for c in path.column_names:
        if c in cols and owner[c] not in selected:
            selected.append(owner[c])
    selected += [f for f in forced if f not in selected]
    return ScreenResult(
        selected=selected,
        deviance=float(path.deviance_explained[i]),
        full_deviance=dstar,
        forced=forced,
    )


def family_for(kind: str, n_levels: int = 0) -> str:
    if kind == "categorical":
        return "binomial" if n_levels == 2 else "multinomial"
    return "gaussian"


def prescreen(frame: pd.DataFrame, predictors, response, family: str, weights,
              threshold: float = 0.95, forced=()) -> ScreenResult:
    """Screen ``predictors`` of ``frame`` for one response."""
    Z, names, parents = design_matrix(frame, predictors, weights)
    y = np.asarray(response)
    if family == "multinomial":
        # drop unobserved classes so every column of the indicator matrix has support
        _, y = np.unique(y, return_inverse=True)
        if y.max() == 1:
            family = "binomial"
    if Z.shape[1] == 0 or len(y) < 10 or np.unique(y).size < 2:
        return ScreenResult(selected=list(forced), null_model=True, forced=list(forced))
    path = lasso_path(Z, y, family, weights=weights, column_names=names, parents=parents)
    return screen_predictors(path, threshold, forced)
