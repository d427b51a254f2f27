"""Loss functions for the boosted learner.

Every objective works on *raw* scores (logits for the log-losses) and maps
them to predictions with :meth:`Objective.transform`. Gradients and
hessians are taken with respect to the raw score of one observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

PROB_CLIP = 1e-15
KINDS = ("multiclass_logloss", "binary_logloss", "squared_error", "pinball")


@dataclass(frozen=True)
class Objective:
    kind: str
    n_classes: int = 1
    percentile: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.kind == "multiclass_logloss" and self.n_classes < 2:
            raise ValueError("multiclass objective needs at least 2 classes")
        if self.kind == "pinball":
            if self.percentile is None or not 0.0 < self.percentile < 1.0:
                raise ValueError("pinball percentile must lie strictly inside (0, 1)")

    @classmethod
    def multiclass(cls, n_classes: int) -> "Objective":
        return cls("multiclass_logloss", n_classes=int(n_classes))

    @classmethod
    def binary(cls) -> "Objective":
        return cls("binary_logloss")

    @classmethod
    def l2(cls) -> "Objective":
        return cls("squared_error")

    @classmethod
    def pinball(cls, percentile: float) -> "Objective":
        return cls("pinball", percentile=float(percentile))

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.kind == "multiclass_logloss" else 1

    @property
    def is_classification(self) -> bool:
        return self.kind in ("multiclass_logloss", "binary_logloss")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_classes": self.n_classes, "percentile": self.percentile}

    @classmethod
    def from_dict(cls, d: dict) -> "Objective":
        return cls(d["kind"], n_classes=int(d.get("n_classes", 1)), percentile=d.get("percentile"))

    # ------------------------------------------------------------------

    def transform(self, raw: np.ndarray) -> np.ndarray:
        """Raw scores (N x n_outputs) to predictions."""
        if self.kind == "multiclass_logloss":
            return softmax(raw, axis=1)
        if self.kind == "binary_logloss":
            return expit(raw)
        return raw

    def init_score(self, y: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Constant raw score minimising the weighted loss."""
        if self.kind == "squared_error":
            return np.array([np.average(y, weights=w)])
        if self.kind == "pinball":
            return np.array([weighted_quantile(y, w, self.percentile)])
        if self.kind == "binary_logloss":
            p = np.clip(np.average(y, weights=w), PROB_CLIP, 1 - PROB_CLIP)
            return np.array([np.log(p / (1 - p))])
        shares = np.bincount(y.astype(np.int64), weights=w, minlength=self.n_classes)
        shares = np.clip(shares / shares.sum(), PROB_CLIP, None)
        logp = np.log(shares)
        return logp - logp.mean()

    def gradients(self, raw: np.ndarray, y: np.ndarray, w: np.ndarray):
        """Per-observation (gradient, hessian), each shaped like ``raw``."""
        wc = w[:, None]
        if self.kind == "squared_error":
            g = 2.0 * (raw - y[:, None])
            h = np.full_like(raw, 2.0)
        elif self.kind == "pinball":
            P = self.percentile
            g = np.where(y[:, None] >= raw, -P, 1.0 - P)
            h = np.zeros_like(raw)
        elif self.kind == "binary_logloss":
            p = expit(raw)
            g = p - y[:, None]
            h = p * (1.0 - p)
        else:
            p = softmax(raw, axis=1)
            onehot = np.zeros_like(p)
            onehot[np.arange(len(y)), y.astype(np.int64)] = 1.0
            g = p - onehot
            h = p * (1.0 - p)
        return g * wc, h * wc

    def structure_hessian(self, h: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Hessian used to grow tree structure.

        The pinball hessian vanishes almost everywhere, so its trees are grown
        with unit curvature and leaf values are re-fit afterwards.
        """
        if self.kind == "pinball":
            return np.repeat(w[:, None], h.shape[1], axis=1)
        return h

    def loss(self, predictions: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
        return loss_eval(self, predictions, y, w)


def loss_eval(objective: Objective, predictions, actual, weights) -> float:
    """Weighted mean loss of ``predictions`` (transformed scale) against ``actual``.

    Log-loss probabilities are clipped to ``[1e-15, 1 - 1e-15]``.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(actual)
    w = np.asarray(weights, dtype=np.float64)
    if pred.ndim == 2 and objective.kind != "multiclass_logloss":
        pred = pred[:, 0]
    if pred.shape[0] != y.shape[0] or w.shape[0] != y.shape[0]:
        raise ValueError("predictions, actual and weights must have the same length")
    kind = objective.kind
    if kind == "squared_error":
        per = (y - pred) ** 2
    elif kind == "pinball":
        P = objective.percentile
        diff = y - pred
        per = np.maximum(P * diff, (P - 1.0) * diff)
    elif kind == "binary_logloss":
        p = np.clip(pred, PROB_CLIP, 1 - PROB_CLIP)
        per = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    else:
        p = np.clip(pred[np.arange(len(y)), y.astype(np.int64)], PROB_CLIP, 1 - PROB_CLIP)
        per = -np.log(p)
    return float(np.sum(w * per) / np.sum(w))


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q: float) -> float:
    """Smallest value whose cumulative weight share reaches ``q``."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    cw = np.cumsum(weights[order])
    i = int(np.searchsorted(cw, q * cw[-1], side="left"))
    return float(v[min(i, len(v) - 1)])
