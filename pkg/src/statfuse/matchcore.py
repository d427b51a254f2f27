"""Kernels for conditional-expectation matching.

Rows are compared in the space of their model-predicted conditional
expectations (class probabilities, or a mean plus quantiles). Columns are
robust-scaled so the median maps to 0.5 and about 99.8% of a normal sample
lands in [0, 1]. For continuous variables, each donor anchor receives a
variable-length pool of neighbouring observed values whose length minimises
a divergence from the anchor's predicted mean and quantiles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

EPSILON = 0.001
DEFAULT_PERCENTILES = (0.166, 0.5, 0.833)
DEFAULT_K = 500
APPROX_EPS = 0.1  # relative distance error bound of the approximate search


# -- scaling ---------------------------------------------------------------------------


def _edge(epsilon: float) -> float:
    # upper normal quantile; the lower one is its negative by symmetry, which
    # makes the scaled median exactly 0.5 in floating point
    return float(stats.norm.ppf(1.0 - epsilon))


@dataclass
class ScalingParams:
    """Per-column centre and spread for robust scaling.

    ``mad`` holds the unscaled median absolute deviation, or half the IQR
    when the MAD vanishes. A zero entry marks a constant column that is
    left out of distance computations.
    """

    median: np.ndarray
    mad: np.ndarray
    epsilon: float = EPSILON

    def __post_init__(self):
        self.median = np.asarray(self.median, dtype=np.float64)
        self.mad = np.asarray(self.mad, dtype=np.float64)
        if self.median.shape != self.mad.shape:
            raise ValueError("median and mad must have the same length")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")

    @property
    def keep(self) -> np.ndarray:
        return self.mad > 0

    @property
    def n_columns(self) -> int:
        return self.median.size

    def to_dict(self) -> dict:
        return {"median": self.median.tolist(), "mad": self.mad.tolist(), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingParams":
        return cls(np.array(d["median"], dtype=np.float64), np.array(d["mad"], dtype=np.float64),
                   float(d["epsilon"]))


def robust_scale_fit(matrix, epsilon: float = EPSILON) -> ScalingParams:
    """Column medians and MADs of an unscaled expectation matrix."""
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite expectation values")
    med = np.median(X, axis=0)
    mad = np.median(np.abs(X - med), axis=0)
    flat = mad <= 0
    if flat.any():
        q1, q3 = np.quantile(X[:, flat], [0.25, 0.75], axis=0)
        mad[flat] = np.maximum((q3 - q1) / 2.0, 0.0)
        if np.any(mad <= 0):
            log.info("event=scale_constant_columns n=%d", int(np.sum(mad <= 0)))
    return ScalingParams(med, mad, epsilon)


def robust_scale_apply(params: ScalingParams, matrix, drop_constant: bool = True) -> np.ndarray:
    """Map columns to ``((x - med) / mad - q(eps)) / (2 q(1 - eps))``.

    ``q`` is the standard normal quantile function. Constant columns are
    dropped unless ``drop_constant`` is false, in which case they map to 0.5.
    """
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != params.n_columns:
        raise ValueError(f"matrix has {X.shape[1]} columns, scaling expects {params.n_columns}")
    hi = _edge(params.epsilon)
    keep = params.keep
    out = np.full(X.shape, 0.5)
    z = (X[:, keep] - params.median[keep]) / params.mad[keep]
    out[:, keep] = (z + hi) / (2.0 * hi)
    return out[:, keep] if drop_constant else out


def robust_scale_invert(params: ScalingParams, scaled) -> np.ndarray:
    """Inverse of :func:`robust_scale_apply` on the kept columns.

    Dropped constant columns come back as their median.
    """
    S = np.atleast_2d(np.asarray(scaled, dtype=np.float64))
    keep = params.keep
    hi = _edge(params.epsilon)
    out = np.tile(params.median, (S.shape[0], 1))
    out[:, keep] = (S * 2.0 * hi - hi) * params.mad[keep] + params.median[keep]
    return out


# -- neighbour search ------------------------------------------------------------------


def knn_search(reference, queries, K: int, exact: bool = True, tree: cKDTree | None = None,
               workers: int = 1):
    """Euclidean K nearest reference rows for each query row.

    Returns ``(index, distance)`` arrays of shape (n_queries, K), nearest
    first. ``exact=False`` allows neighbours within a factor 1.1 of the true
    distances. Pass a prebuilt ``tree`` to reuse it across query batches.
    """
    R = np.asarray(reference, dtype=np.float64)
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if R.ndim != 2 or Q.shape[1] != R.shape[1]:
        raise ValueError("reference and queries need the same column count")
    if K < 1 or K > R.shape[0]:
        raise ValueError(f"K={K} outside [1, {R.shape[0]}] reference rows")
    if tree is None:
        tree = cKDTree(R)
    dist, idx = tree.query(Q, k=K, eps=0.0 if exact else APPROX_EPS, workers=workers)
    if K == 1:
        dist, idx = dist[:, None], idx[:, None]
    return idx.astype(np.int64), dist


# -- divergence ------------------------------------------------------------------------


def tau(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    return np.where(P > 0.5, P, 1.0 - P)


def spread(Q, P, floor: float = 0.0):
    """Normal-equivalent standard deviation implied by the outer quantiles.

    Works on a single quantile vector or row-wise on a matrix.
    """
    Q = np.asarray(Q, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    gap = stats.norm.ppf(P[-1]) - stats.norm.ppf(P[0])
    s = (Q[..., -1] - Q[..., 0]) / gap
    return np.maximum(s, floor)


def sigma_floor(z) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        return 1e-6
    mad = float(np.median(np.abs(z - np.median(z))))
    return 1e-6 * (mad if mad > 0 else 1.0)


def divergence(x, u: float, Q, P, floor: float | None = None):
    """Divergence of a value sample from a predicted mean and quantiles.

    Returns ``(delta_u, delta_j, delta)`` where ``delta_j`` has one entry per
    percentile and ``delta = delta_u + sum(delta_j)``. The quantile spread
    is floored at ``floor``, by default ``1e-6`` times the MAD of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < 1:
        raise ValueError("divergence needs at least one value")
    if floor is None:
        floor = sigma_floor(x)
    Q = np.asarray(Q, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    _check_percentiles(P)
    s = spread(Q, P, floor)
    t = (x.mean() - u) / s
    du = float(-np.expm1(-0.5 * t * t))
    share = (x[:, None] <= Q[None, :]).mean(axis=0)
    dj = np.abs(share - P) / tau(P)
    return du, dj, du + float(dj.sum())


def _check_percentiles(P):
    if P.ndim != 1 or P.size < 2:
        raise ValueError("need at least two percentiles")
    if np.any(P <= 0) or np.any(P >= 1) or np.any(np.diff(P) <= 0):
        raise ValueError("percentiles must be strictly increasing inside (0, 1)")


def prefix_divergence(values, u, Q, P, floor: float = 0.0) -> np.ndarray:
    """Divergence of every prefix of every neighbour list.

    ``values`` is (A, K) ordered nearest first, ``u`` (A,), ``Q`` (A, p).
    Returns (A, K) with entry ``[a, k-1]`` the divergence of the first k
    values of row a.
    """
    V = np.atleast_2d(np.asarray(values, dtype=np.float64))
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    P = np.asarray(P, dtype=np.float64)
    _check_percentiles(P)
    k = np.arange(1, V.shape[1] + 1, dtype=np.float64)
    s = spread(Q, P, floor)
    t = (np.cumsum(V, axis=1) / k - u[:, None]) / s[:, None]
    out = -np.expm1(-0.5 * t * t)
    tp = tau(P)
    for j in range(P.size):
        share = np.cumsum(V <= Q[:, j:j + 1], axis=1) / k
        out += np.abs(share - P[j]) / tp[j]
    return out


def optimal_k(neighbor_values, u, Q, P, floor: float | None = None, block: int = 1024):
    """Prefix length minimising the divergence; ties go to the smaller k.

    Accepts one list (returns an int) or a matrix of lists (returns an array).
    ``floor`` defaults to the spread floor of all supplied values.
    """
    V = np.asarray(neighbor_values, dtype=np.float64)
    if floor is None:
        floor = sigma_floor(V)
    single = V.ndim == 1
    V = np.atleast_2d(V)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    if V.shape[1] < 1:
        raise ValueError("empty neighbour list")
    ks = np.empty(V.shape[0], dtype=np.int64)
    for a in range(0, V.shape[0], block):
        d = prefix_divergence(V[a:a + block], u[a:a + block], Q[a:a + block], P, floor)
        ks[a:a + block] = np.argmin(d, axis=1) + 1
    return int(ks[0]) if single else ks


# -- k-means ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int


def _kmeanspp(X, r, rng):
    n = X.shape[0]
    centers = np.empty((r, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, r):
        tot = d2.sum()
        if tot <= 0:
            i = rng.integers(n)
        else:
            i = int(np.searchsorted(np.cumsum(d2), rng.random() * tot, side="right"))
            i = min(i, n - 1)
        centers[c] = X[i]
        d2 = np.minimum(d2, np.sum((X - centers[c]) ** 2, axis=1))
    return centers


def kmeans_reduce(D_b, r: int, seed: int = 0, max_iter: int = 25, tol: float = 1e-4) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iter`` iterations or once the relative change in
    inertia drops below ``tol``. A cluster left empty is reseeded at the
    point farthest from its current center.
    """
    X = np.asarray(D_b, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= r < n:
        raise ValueError(f"need 1 <= r < {n}, got r={r}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, r, rng)
    prev = np.inf
    inertia = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        dist, labels = cKDTree(centers).query(X, k=1)
        d2 = dist**2
        inertia = float(d2.sum())
        counts = np.bincount(labels, minlength=r)
        for c in np.flatnonzero(counts == 0):
            far = int(np.argmax(d2))
            centers[c] = X[far]
            labels[far] = c
            d2[far] = 0.0
            counts = np.bincount(labels, minlength=r)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        nz = counts > 0
        centers[nz] = sums[nz] / counts[nz, None]
        if np.isfinite(prev) and abs(prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    dist, labels = cKDTree(centers).query(X, k=1)
    return KMeansResult(centers, labels.astype(np.int64), float(np.sum(dist**2)), it)


# -- donor pools -----------------------------------------------------------------------


@dataclass
class DonorPool:
    """Per-anchor neighbour values, truncated at the optimal prefix.

    Anchor ``a`` owns ``values[offsets[a]:offsets[a] + k_star[a]]``, nearest
    first; only this prefix is ever sampled, so the tail beyond ``k_star``
    is not stored.
    """

    anchors: np.ndarray  # scaled coordinates, (A, d)
    k_star: np.ndarray
    offsets: np.ndarray
    values: np.ndarray
    K: int

    def __post_init__(self):
        self._tree = None

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    def pool(self, a: int) -> np.ndarray:
        return self.values[self.offsets[a]:self.offsets[a] + self.k_star[a]]

    def nearest_anchor(self, scaled, exact: bool = True) -> np.ndarray:
        if self.anchors.shape[1] == 0:
            return np.zeros(np.atleast_2d(scaled).shape[0], dtype=np.int64)
        if self._tree is None:
            self._tree = cKDTree(self.anchors)
        idx, _ = knn_search(self.anchors, scaled, 1, exact=exact, tree=self._tree)
        return idx[:, 0]

    def draw(self, anchor_idx, uniforms) -> np.ndarray:
        """Uniform draw from each anchor's prefix pool given U(0,1) numbers."""
        a = np.asarray(anchor_idx, dtype=np.int64)
        k = self.k_star[a]
        pick = np.minimum((np.asarray(uniforms) * k).astype(np.int64), k - 1)
        return self.values[self.offsets[a] + pick]

    def to_arrays(self) -> dict:
        return {"anchors": self.anchors, "k_star": self.k_star, "offsets": self.offsets,
                "values": self.values, "K": np.array(self.K)}

    @classmethod
    def from_arrays(cls, d) -> "DonorPool":
        return cls(np.asarray(d["anchors"]), np.asarray(d["k_star"]), np.asarray(d["offsets"]),
                   np.asarray(d["values"]), int(d["K"]))


def build_donor_pools(scaled, expectations, Z, K: int = DEFAULT_K, P=DEFAULT_PERCENTILES,
                      reduction: int | None = None, scaling: ScalingParams | None = None,
                      seed: int = 0, exact: bool = True, block: int = 2048,
                      workers: int = 1) -> DonorPool:
    """Variable-length neighbour pools for continuous matching.

    Parameters
    ----------
    scaled : ndarray (N_b, d)
        Scaled donor expectations (constant columns already dropped).
    expectations : ndarray (N_b, p + 1)
        Unscaled mean (first column) and quantile predictions.
    Z : ndarray (N_b,)
        Observed donor values.
    K : int
        Neighbour list length; clamped to N_b with a warning.
    reduction : int, optional
        Replace donor anchors by this many k-means centers. Center
        expectations are recovered by inverting ``scaling``.
    """
    S = np.asarray(scaled, dtype=np.float64)
    E = np.asarray(expectations, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    n = S.shape[0]
    if E.shape[0] != n or Z.shape[0] != n:
        raise ValueError("scaled, expectations and Z must align row-wise")
    P = np.asarray(P, dtype=np.float64)
    if E.shape[1] != P.size + 1:
        raise ValueError("expectations need a mean column plus one column per percentile")
    if K > n:
        log.warning("event=pool_k_clamped K=%d n_donors=%d", K, n)
        K = n
    if S.shape[1] == 0:
        # no informative expectation column: every donor is equally close
        log.warning("event=pool_uninformative n_donors=%d", n)
        return DonorPool(np.zeros((1, 0)), np.array([n]), np.array([0, n]), Z.copy(), n)
    if reduction:
        if scaling is None:
            raise ValueError("reduction needs the scaling parameters to recover center expectations")
        km = kmeans_reduce(S, int(reduction), seed=seed)
        anchors = km.centers
        E_anchor = robust_scale_invert(scaling, anchors)
    else:
        anchors = S
        E_anchor = E
    u = E_anchor[:, 0]
    Q = np.sort(E_anchor[:, 1:], axis=1)  # independently fitted quantiles may cross
    floor = sigma_floor(Z)
    tree = cKDTree(S)
    A = anchors.shape[0]
    k_star = np.empty(A, dtype=np.int64)
    pieces = []
    for a in range(0, A, block):
        idx, _ = knn_search(S, anchors[a:a + block], K, exact=exact, tree=tree, workers=workers)
        V = Z[idx]
        ks = optimal_k(V, u[a:a + block], Q[a:a + block], P, floor)
        k_star[a:a + block] = ks
        pieces.extend(V[i, :ks[i]] for i in range(V.shape[0]))
    offsets = np.zeros(A + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(k_star)
    values = np.concatenate(pieces) if pieces else np.empty(0)
    return DonorPool(np.ascontiguousarray(anchors), k_star, offsets, values, int(K))
