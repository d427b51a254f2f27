"""Histogram gradient-boosted trees for probabilities, means and quantiles."""

from .ensemble import (
    TrainParams,
    Tree,
    TreeEnsemble,
    encode_features,
    fit_gbm,
    load_ensemble,
    predict,
    predict_raw,
    save_ensemble,
)
from .objectives import Objective, loss_eval, weighted_quantile

__all__ = [
    "Objective",
    "TrainParams",
    "Tree",
    "TreeEnsemble",
    "encode_features",
    "fit_gbm",
    "load_ensemble",
    "loss_eval",
    "predict",
    "predict_raw",
    "save_ensemble",
    "weighted_quantile",
]
