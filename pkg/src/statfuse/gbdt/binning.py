"""Feature quantisation into at most 255 histogram bins."""

from __future__ import annotations

import numpy as np

MAX_BINS = 255


class BinMapper:
    """Maps raw feature columns to uint8 bin codes.

    Continuous features get upper bin edges: bin ``b`` holds values in
    ``(edges[b-1], edges[b]]``, so ``x <= edges[t]`` iff ``bin(x) <= t``.
    Categorical features use their level code as bin.
    """

    def __init__(self, is_categorical, max_bins: int = MAX_BINS):
        self.is_categorical = np.asarray(is_categorical, dtype=bool)
        self.max_bins = max_bins
        self.edges: list[np.ndarray] = []
        self.n_bins = np.zeros(len(self.is_categorical), dtype=np.int32)

    def fit(self, X: np.ndarray, n_levels=None) -> "BinMapper":
        self.edges = []
        for j in range(X.shape[1]):
            col = X[:, j]
            if self.is_categorical[j]:
                nl = int(n_levels[j]) if n_levels is not None else int(col.max()) + 1
                if nl > self.max_bins:
                    raise ValueError(f"categorical feature {j} has {nl} levels; limit {self.max_bins}")
                self.edges.append(np.empty(0))
                self.n_bins[j] = max(nl, 1)
                continue
            uniq = np.unique(col)
            if uniq.size <= self.max_bins:
                edges = (uniq[:-1] + uniq[1:]) / 2.0
            else:
                qs = np.quantile(col, np.linspace(0, 1, self.max_bins + 1)[1:-1], method="lower")
                cuts = np.unique(qs)
                # cut strictly between the quantile value and the next distinct value
                nxt = uniq[np.minimum(np.searchsorted(uniq, cuts, side="right"), uniq.size - 1)]
                edges = np.unique((cuts + nxt) / 2.0)
                edges = edges[edges < uniq[-1]]
            self.edges.append(edges.astype(np.float64))
            self.n_bins[j] = edges.size + 1
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape, dtype=np.uint8)
        for j in range(X.shape[1]):
            if self.is_categorical[j]:
                out[:, j] = X[:, j].astype(np.int64)
            else:
                out[:, j] = np.searchsorted(self.edges[j], X[:, j], side="left")
        return np.ascontiguousarray(out)

    def threshold(self, feature: int, bin_index: int) -> float:
        return float(self.edges[feature][bin_index])
