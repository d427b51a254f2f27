"""Cross-validated gradient-boosted tree ensembles."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import _kernels as K
from .binning import BinMapper
from .objectives import Objective, loss_eval

FORMAT_NAME = "statfuse-gbdt"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainParams:
    leaf_grid: tuple = (16, 32, 64)
    feature_subsample: float = 0.8
    min_node_frac: float = 0.001
    min_node_floor: int = 20
    folds: int = 5
    max_iterations: int = 500
    learning_rate: float = 0.1
    seed: int = 0
    early_stopping_rounds: int = 25
    min_hessian: float = 1e-3
    lambda_l2: float = 0.0
    cat_smooth: float = 10.0

    def __post_init__(self):
        if not self.leaf_grid or min(self.leaf_grid) < 2:
            raise ValueError("leaf_grid needs leaf counts >= 2")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise ValueError("feature_subsample must be in (0, 1]")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def min_node(self, n: int) -> int:
        return max(int(self.min_node_floor), int(math.ceil(self.min_node_frac * n)))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["leaf_grid"] = list(self.leaf_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainParams":
        d = dict(d)
        if "leaf_grid" in d:
            d["leaf_grid"] = tuple(d["leaf_grid"])
        return cls(**d)


@dataclass
class Tree:
    output: int
    split_feature: np.ndarray
    threshold: np.ndarray
    is_categorical: np.ndarray
    cat_left: list
    cat_seen: list
    left: np.ndarray
    right: np.ndarray
    default_left: np.ndarray
    leaf_value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_value)

    def to_record(self) -> dict:
        return {
            "output": int(self.output),
            "split_feature": self.split_feature.tolist(),
            "threshold": self.threshold.tolist(),
            "is_categorical": self.is_categorical.astype(int).tolist(),
            "cat_left": [list(map(int, s)) for s in self.cat_left],
            "cat_seen": [list(map(int, s)) for s in self.cat_seen],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "default_left": self.default_left.astype(int).tolist(),
            "leaf_value": self.leaf_value.tolist(),
        }

    @classmethod
    def from_record(cls, r: dict) -> "Tree":
        return cls(
            output=int(r["output"]),
            split_feature=np.asarray(r["split_feature"], dtype=np.int32),
            threshold=np.asarray(r["threshold"], dtype=np.float64),
            is_categorical=np.asarray(r["is_categorical"], dtype=bool),
            cat_left=[tuple(s) for s in r["cat_left"]],
            cat_seen=[tuple(s) for s in r["cat_seen"]],
            left=np.asarray(r["left"], dtype=np.int32),
            right=np.asarray(r["right"], dtype=np.int32),
            default_left=np.asarray(r["default_left"], dtype=bool),
            leaf_value=np.asarray(r["leaf_value"], dtype=np.float64),
        )


@dataclass
class TreeEnsemble:
    objective: Objective
    feature_names: list
    feature_levels: list
    base_score: np.ndarray
    trees: list = field(default_factory=list)
    n_iterations: int = 0
    num_leaves: int = 0
    cv_loss: float = float("nan")
    degenerate: bool = False
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    def pack(self):
        if self._packed is None:
            self._packed = _pack_trees(self.trees)
        return self._packed


def _pack_trees(trees):
    n_int = np.array([len(t.split_feature) for t in trees], dtype=np.int64)
    n_leaf = np.array([t.n_leaves for t in trees], dtype=np.int64)
    node_off = np.zeros(len(trees), dtype=np.int64)
    leaf_off = np.zeros(len(trees), dtype=np.int64)
    if len(trees):
        node_off[1:] = np.cumsum(n_int)[:-1]
        leaf_off[1:] = np.cumsum(n_leaf)[:-1]
    total = int(n_int.sum())
    B = 256
    cat_left = np.zeros((max(total, 1), B), dtype=bool)
    cat_seen = np.zeros((max(total, 1), B), dtype=bool)
    for t, tree in enumerate(trees):
        for k in range(len(tree.split_feature)):
            if tree.is_categorical[k]:
                cat_left[node_off[t] + k, list(tree.cat_left[k])] = True
                cat_seen[node_off[t] + k, list(tree.cat_seen[k])] = True

    def cat(name, dtype):
        parts = [getattr(t, name) for t in trees]
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    return (
        node_off,
        leaf_off,
        n_int,
        np.array([t.output for t in trees], dtype=np.int64),
        cat("split_feature", np.int64),
        cat("threshold", np.float64),
        cat("is_categorical", np.bool_),
        cat_left,
        cat_seen,
        cat("left", np.int64),
        cat("right", np.int64),
        cat("default_left", np.bool_),
        cat("leaf_value", np.float64),
    )


# -- feature encoding -----------------------------------------------------------


def _levels_of(col) -> tuple | None:
    if isinstance(col.dtype, pd.CategoricalDtype):
        return tuple(str(c) for c in col.cat.categories)
    return None


def encode_features(frame: pd.DataFrame, names, levels) -> np.ndarray:
    """Float matrix in ``names`` order; categoricals become level codes (unseen -> -1)."""
    X = np.empty((len(frame), len(names)), dtype=np.float64)
    for j, (name, lv) in enumerate(zip(names, levels)):
        col = frame[name]
        if lv is None:
            X[:, j] = np.asarray(col, dtype=np.float64)
        else:
            lookup = {v: i for i, v in enumerate(lv)}
            if isinstance(col.dtype, pd.CategoricalDtype):
                cats = [lookup.get(str(c), -1) for c in col.cat.categories]
                codes = col.cat.codes.to_numpy()
                mapped = np.asarray(cats + [-1], dtype=np.float64)
                X[:, j] = mapped[np.where(codes < 0, len(cats), codes)]
            else:
                X[:, j] = [lookup.get(str(v), -1) for v in col]
    return X


def _as_frame(features) -> pd.DataFrame:
    if hasattr(features, "frame") and hasattr(features, "columns"):
        return features.frame
    if isinstance(features, pd.DataFrame):
        return features
    raise TypeError("features must be a DataFrame or Microdata")


# -- training --------------------------------------------------------------------


class _Run:
    """Boosting state for one training subset (a CV fold or the full data)."""

    def __init__(self, rows, base, n):
        self.rows = rows
        mask = np.ones(n, dtype=bool)
        mask[rows] = False
        self.other = np.flatnonzero(mask)
        self.raw = np.tile(base, (n, 1))
        self.base = base
        self.trees: list[Tree] = []


def _feature_mask(n_features, frac, seed, iteration):
    n_keep = max(1, int(round(frac * n_features)))
    if n_keep >= n_features:
        return np.ones(n_features, dtype=np.bool_)
    rng = np.random.default_rng([int(seed), int(iteration)])
    mask = np.zeros(n_features, dtype=np.bool_)
    mask[rng.choice(n_features, size=n_keep, replace=False)] = True
    return mask


def _boost_step(run, Xb, y, w, objective, mask, num_leaves, min_data, params, mapper, is_cat,
                keep=True):
    g, h = objective.gradients(run.raw, y, w)
    hs = objective.structure_hessian(h, w)
    leaf_idx = np.empty(Xb.shape[0], dtype=np.int64)
    for k in range(objective.n_outputs):
        out = K.build_tree(
            Xb, np.ascontiguousarray(g[:, k]), np.ascontiguousarray(hs[:, k]), w, run.rows,
            mask, is_cat, mapper.n_bins, num_leaves, float(min_data), params.min_hessian,
            params.lambda_l2, params.cat_smooth,
        )
        sf, sb, ncat, cl, cs, left, right, dl, values, idx, lstart, lcount = out
        K.partition_leaves(idx, lstart, lcount, leaf_idx)
        if run.other.size:
            K.apply_binned(Xb, run.other, sf, sb, ncat, cl, cs, left, right, dl, leaf_idx)
        if objective.kind == "pinball":
            resid = y - run.raw[:, 0]
            K.leaf_quantiles(idx, lstart, lcount, resid, w, objective.percentile, values)
        values = values * params.learning_rate
        run.raw[:, k] += values[leaf_idx]
        if not keep:
            continue
        thr = np.array(
            [np.nan if ncat[i] else mapper.threshold(sf[i], sb[i]) for i in range(len(sf))],
            dtype=np.float64,
        )
        run.trees.append(
            Tree(
                output=k,
                split_feature=sf,
                threshold=thr,
                is_categorical=ncat,
                cat_left=[tuple(np.flatnonzero(cl[i])) if ncat[i] else () for i in range(len(sf))],
                cat_seen=[tuple(np.flatnonzero(cs[i])) if ncat[i] else () for i in range(len(sf))],
                left=left,
                right=right,
                default_left=dl,
                leaf_value=values,
            )
        )


def _is_degenerate(objective, y, w):
    if objective.is_classification:
        return np.unique(y).size < 2
    return np.all(y == y[0])


def fit_gbm(features, target, weights, objective: Objective, params: TrainParams | None = None,
            feature_names=None) -> TreeEnsemble:
    """Fit a boosted ensemble with cross-validated leaf count and iteration count.

    Parameters
    ----------
    features : DataFrame or Microdata
        Predictor columns. Categorical dtype columns are split on level sets.
    target : array-like
        Response. Class codes ``0..v-1`` for the log-loss objectives.
    weights : array-like
        Positive observation weights.
    objective : Objective
    params : TrainParams, optional
    feature_names : list of str, optional
        Columns of ``features`` to use; defaults to all.

    Returns
    -------
    TreeEnsemble
        ``degenerate`` is set (with zero iterations) when the target has a
        single class or zero variance.
    """
    params = params or TrainParams()
    frame = _as_frame(features)
    names = list(feature_names) if feature_names is not None else list(frame.columns)
    levels = [_levels_of(frame[n]) for n in names]
    X = encode_features(frame, names, levels)
    y = np.asarray(target, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n = len(y)
    if n < params.folds:
        raise ValueError(f"need at least {params.folds} rows, got {n}")
    if X.shape[0] != n or w.shape[0] != n:
        raise ValueError("features, target and weights must have the same length")
    if objective.kind == "binary_logloss" and not np.all((y == 0) | (y == 1)):
        raise ValueError("binary objective needs a 0/1 target")
    if objective.kind == "multiclass_logloss":
        if np.any((y < 0) | (y >= objective.n_classes) | (y != np.round(y))):
            raise ValueError("multiclass objective needs integer class codes")
    w = w / w.mean()

    base = objective.init_score(y, w)
    model = TreeEnsemble(objective, names, levels, base)
    if _is_degenerate(objective, y, w) or not names:
        model.degenerate = True
        return model

    is_cat = np.array([lv is not None for lv in levels], dtype=np.bool_)
    n_levels = [len(lv) if lv is not None else 0 for lv in levels]
    mapper = BinMapper(is_cat).fit(X, n_levels)
    Xb = mapper.transform(X)
    min_data = params.min_node(n)

    perm = np.random.default_rng(params.seed).permutation(n)
    folds = [np.sort(f) for f in np.array_split(perm, params.folds)]
    train_rows = []
    for i in range(params.folds):
        train_rows.append(np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i])))

    best = (np.inf, params.leaf_grid[0], 0)
    for num_leaves in params.leaf_grid:
        runs = [
            _Run(tr, objective.init_score(y[tr], w[tr]), n) for tr in train_rows
        ]
        curve = [_oof_loss(runs, folds, objective, y, w)]
        for it in range(1, params.max_iterations + 1):
            mask = _feature_mask(X.shape[1], params.feature_subsample, params.seed, it)
            for run in runs:
                _boost_step(run, Xb, y, w, objective, mask, num_leaves, min_data, params,
                            mapper, is_cat, keep=False)
            curve.append(_oof_loss(runs, folds, objective, y, w))
            if it - int(np.argmin(curve)) >= params.early_stopping_rounds:
                break
        k = int(np.argmin(curve))
        if curve[k] < best[0]:
            best = (curve[k], num_leaves, k)

    cv_loss, num_leaves, n_iter = best
    full = _Run(np.arange(n, dtype=np.int64), base, n)
    for it in range(1, n_iter + 1):
        mask = _feature_mask(X.shape[1], params.feature_subsample, params.seed, it)
        _boost_step(full, Xb, y, w, objective, mask, num_leaves, min_data, params, mapper, is_cat)
    model.trees = full.trees
    model.n_iterations = n_iter
    model.num_leaves = num_leaves
    model.cv_loss = float(cv_loss)
    return model


def _oof_loss(runs, folds, objective, y, w):
    raw = np.empty_like(runs[0].raw)
    for run, valid in zip(runs, folds):
        raw[valid] = run.raw[valid]
    return loss_eval(objective, objective.transform(raw), y, w)


# -- prediction -------------------------------------------------------------------


def predict_raw(model: TreeEnsemble, features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        X = np.ascontiguousarray(features, dtype=np.float64)
    else:
        X = encode_features(_as_frame(features), model.feature_names, model.feature_levels)
    out = np.tile(np.asarray(model.base_score, dtype=np.float64), (X.shape[0], 1))
    if model.trees:
        K.predict_raw(X, *model.pack(), out)
    return out


def predict(model: TreeEnsemble, features) -> np.ndarray:
    """Predictions as an N x n_outputs matrix.

    Multiclass rows are softmax probabilities; binary models return the
    probability of class 1; regression objectives return raw predictions.
    """
    return model.objective.transform(predict_raw(model, features))


# -- serialization -------------------------------------------------------------------


def save_ensemble(model: TreeEnsemble, path) -> None:
    """Write ``model`` as JSON lines: one header record then one record per tree."""
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "objective": model.objective.to_dict(),
        "feature_names": list(model.feature_names),
        "feature_levels": [list(lv) if lv is not None else None for lv in model.feature_levels],
        "base_score": np.asarray(model.base_score).tolist(),
        "n_iterations": model.n_iterations,
        "num_leaves": model.num_leaves,
        "cv_loss": model.cv_loss if math.isfinite(model.cv_loss) else None,
        "degenerate": model.degenerate,
        "n_trees": len(model.trees),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for tree in model.trees:
            fh.write(json.dumps(tree.to_record()) + "\n")


def load_ensemble(path) -> TreeEnsemble:
    with open(Path(path), encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: not a {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {header.get('version')}")
        trees = [Tree.from_record(json.loads(line)) for line in fh if line.strip()]
    if len(trees) != header["n_trees"]:
        raise ValueError(f"{path}: expected {header['n_trees']} trees, found {len(trees)}")
    return TreeEnsemble(
        objective=Objective.from_dict(header["objective"]),
        feature_names=header["feature_names"],
        feature_levels=[tuple(lv) if lv is not None else None for lv in header["feature_levels"]],
        base_score=np.asarray(header["base_score"], dtype=np.float64),
        trees=trees,
        n_iterations=header["n_iterations"],
        num_leaves=header["num_leaves"],
        cv_loss=header["cv_loss"] if header["cv_loss"] is not None else float("nan"),
        degenerate=header["degenerate"],
    )
