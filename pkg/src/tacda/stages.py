"""Degradation stages: health index, its binned curvature, k-means on soft-DTW,
variance-based stage ranking, and source/target stage pairing."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .softdtw import soft_dtw_pairwise
from .validation import check_windows

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = (0.33, 0.85)
RIDGE = 1e-6


class Stage(IntEnum):
    SLUGGISH = 0
    ACCELERATED = 1
    TERMINAL = 2


@dataclass
class StageAssignment:
    stages: np.ndarray
    provenance: str  # "label-threshold" or "cluster-variance"

    def __len__(self):
        return len(self.stages)

    def indices(self, stage) -> np.ndarray:
        return np.flatnonzero(self.stages == int(stage))

    def counts(self) -> dict:
        return {s.name: int((self.stages == s).sum()) for s in Stage}


def stage_from_life_fraction(life_fraction, bounds=DEFAULT_BOUNDS) -> np.ndarray:
    """Stage per life fraction; each boundary belongs to the earlier stage."""
    frac = np.asarray(life_fraction, dtype=np.float64)
    lo, hi = bounds
    out = np.full(frac.shape, int(Stage.TERMINAL), dtype=np.int64)
    out[frac <= hi] = Stage.ACCELERATED
    out[frac <= lo] = Stage.SLUGGISH
    return out


def label_source_stages(life_fraction, bounds=DEFAULT_BOUNDS) -> StageAssignment:
    if life_fraction is None:
        raise ValueError("source stage labeling needs life_fraction on every window")
    return StageAssignment(stage_from_life_fraction(life_fraction, bounds), "label-threshold")


# ----------------------------------------------------------------------------
# health index
# ----------------------------------------------------------------------------

class HealthIndex(TransformerMixin, BaseEstimator):
    """Linear health index fitted by least squares of the last-step sensor
    vector onto normalized RUL, rescaled to [0, 1] over the fitting data.

    Attributes
    ----------
    coef_ : ndarray of shape (n_sensors,)
    intercept_ : float
    r2_ : float
    ridge_fallback_ : bool
        True when the design matrix was rank deficient and a tiny ridge was used.
    low_r2_ : bool
    """

    def __init__(self, low_r2_threshold: float = 0.1):
        self.low_r2_threshold = low_r2_threshold

    def fit(self, X, y):
        X = check_windows(X)
        y = np.asarray(y, dtype=np.float64)
        s = X[:, :, -1]
        design = np.column_stack([s, np.ones(len(s))])
        self.ridge_fallback_ = np.linalg.matrix_rank(design) < design.shape[1]
        if self.ridge_fallback_:
            gram = design.T @ design + RIDGE * np.eye(design.shape[1])
            w = np.linalg.solve(gram, design.T @ y)
        else:
            w = np.linalg.lstsq(design, y, rcond=None)[0]
        self.coef_, self.intercept_ = w[:-1], float(w[-1])
        resid = y - design @ w
        ss_tot = float(((y - y.mean()) ** 2).sum())
        self.r2_ = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 0.0
        self.low_r2_ = self.r2_ < self.low_r2_threshold
        raw = s @ self.coef_
        self.hi_min_, self.hi_max_ = float(raw.min()), float(raw.max())
        return self

    def transform(self, X):
        check_is_fitted(self, "coef_")
        raw = check_windows(X)[:, :, -1] @ self.coef_
        span = self.hi_max_ - self.hi_min_
        return (raw - self.hi_min_) / span if span > 0 else np.zeros_like(raw)


def fit_health_index(X, y):
    """Sensor weights and per-window health index for labeled windows."""
    est = HealthIndex().fit(X, y)
    return est.coef_, est.transform(X), est


@dataclass
class HealthIndexCurve:
    bin_count: int
    averaged_hi: np.ndarray
    smoothed_hi: np.ndarray
    second_derivative: np.ndarray
    counts: np.ndarray
    empty_bins: np.ndarray

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def hi_second_derivative(y, h, K: int = 100, sigma: float = 2.0) -> HealthIndexCurve:
    """Bin ``h`` by ``y`` into K bins, average, smooth, and take second differences.

    ``second_derivative[k - 2] = s[k] - 2 s[k-1] + s[k-2]`` for k = 2..K-1 on the
    smoothed sequence ``s``.  Empty bins are filled by linear interpolation and
    reported in ``empty_bins``.
    """
    if K < 3:
        raise ValueError(f"K must be >= 3, got {K}")
    y = np.asarray(y, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if y.shape != h.shape:
        raise ValueError(f"y and h differ in shape: {y.shape} vs {h.shape}")
    k = np.clip(np.floor(y * K).astype(np.int64), 0, K - 1)
    sums = np.bincount(k, weights=h, minlength=K)
    counts = np.bincount(k, minlength=K)
    filled = counts > 0
    if not filled.any():
        raise ValueError("all bins are empty")
    avg = np.zeros(K)
    avg[filled] = sums[filled] / counts[filled]
    idx = np.arange(K)
    if not filled.all():
        avg[~filled] = np.interp(idx[~filled], idx[filled], avg[filled])
    smooth = gaussian_filter1d(avg, sigma, mode="reflect") if sigma > 0 else avg.copy()
    second = smooth[2:] - 2.0 * smooth[1:-1] + smooth[:-2]
    return HealthIndexCurve(K, avg, smooth, second, counts, np.flatnonzero(~filled))


# ----------------------------------------------------------------------------
# soft-DTW k-means
# ----------------------------------------------------------------------------

@dataclass
class ClusterResult:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    iterations_run: int
    distance_evals: int
    inertia_trace: list = field(default_factory=list)
    n_reseeds: int = 0


class SoftDTWKMeans(ClusterMixin, BaseEstimator):
    """k-means whose assignment step uses soft-DTW and whose centers are
    per-timestep, per-sensor means of the member windows.

    Seeding is k-means++ style on soft-DTW (negative values clipped to zero).
    Stops when assignments stop changing or after ``max_iter`` assignment
    steps.  ``distance_evals_`` counts assignment-step evaluations only, so it
    always equals ``n_iter_ * n_samples * n_clusters``.
    """

    def __init__(self, n_clusters: int = 3, gamma: float = 0.1, max_iter: int = 50,
                 random_state: Optional[int] = None):
        self.n_clusters = n_clusters
        self.gamma = gamma
        self.max_iter = max_iter
        self.random_state = random_state

    def _init_centers(self, X, rng):
        n = len(X)
        chosen = [int(rng.integers(n))]
        closest = np.full(n, np.inf)
        for _ in range(1, self.n_clusters):
            d = soft_dtw_pairwise(X, X[chosen[-1:]], self.gamma)[:, 0]
            closest = np.minimum(closest, np.maximum(d, 0.0))
            weights = closest.copy()
            weights[chosen] = 0.0
            total = weights.sum()
            if total > 0:
                nxt = int(rng.choice(n, p=weights / total))
            else:
                nxt = int(rng.choice(np.setdiff1d(np.arange(n), chosen)))
            chosen.append(nxt)
        return X[chosen].copy()

    def fit(self, X, y=None):
        X = check_windows(X)
        n, k = len(X), self.n_clusters
        if n < k:
            raise ValueError(f"need at least n_clusters={k} windows, got {n}")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        rng = np.random.default_rng(self.random_state)
        centers = self._init_centers(X, rng)
        labels = None
        evals = iters = reseeds = 0
        trace = []
        for _ in range(self.max_iter):
            dist = soft_dtw_pairwise(X, centers, self.gamma)
            evals += n * k
            iters += 1
            new = dist.argmin(axis=1)
            trace.append(float(dist[np.arange(n), new].sum()))
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for c in range(k):
                if np.any(labels == c):
                    continue
                own = dist[np.arange(n), labels]
                sizes = np.bincount(labels, minlength=k)
                own = np.where(sizes[labels] > 1, own, -np.inf)
                far = int(own.argmax())
                log.warning("cluster %d empty; reseeded with window %d", c, far)
                labels[far] = c
                reseeds += 1
            centers = np.stack([X[labels == c].mean(axis=0) for c in range(k)])
        self.labels_ = labels
        self.cluster_centers_ = centers
        self.n_iter_ = iters
        self.distance_evals_ = evals
        self.inertia_trace_ = trace
        self.inertia_ = trace[-1]
        self.n_reseeds_ = reseeds
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return soft_dtw_pairwise(check_windows(X), self.cluster_centers_, self.gamma).argmin(axis=1)

    def result(self) -> ClusterResult:
        check_is_fitted(self, "cluster_centers_")
        return ClusterResult(self.n_clusters, self.labels_, self.cluster_centers_, self.n_iter_,
                             self.distance_evals_, list(self.inertia_trace_), self.n_reseeds_)


def kmeans_softdtw(X, k: int = 3, gamma: float = 0.1, max_iter: int = 50, seed=None) -> ClusterResult:
    return SoftDTWKMeans(k, gamma, max_iter, seed).fit(X).result()


# ----------------------------------------------------------------------------
# variance ranking and pairing
# ----------------------------------------------------------------------------

@dataclass
class ClusterStats:
    sensor_variance: np.ndarray
    total_variance: float
    count: int
    sensor_mean: np.ndarray


def cluster_variance(members) -> ClusterStats:
    """Per-sensor population variance over all ``N_c * L`` values, and their sum."""
    members = check_windows(members)
    pooled = members.transpose(1, 0, 2).reshape(members.shape[1], -1)
    mu = pooled.mean(axis=1)
    var = ((pooled - mu[:, None]) ** 2).mean(axis=1)
    return ClusterStats(var, float(var.sum()), len(members), mu)


def rank_stages(variances) -> tuple[dict, bool]:
    """Map cluster id -> Stage by ascending total variance.

    Accepts a sequence (index = cluster id) or a mapping.  Exact ties are broken
    by cluster id and reported through the returned ``low_confidence`` flag.
    """
    items = dict(enumerate(variances)) if not isinstance(variances, Mapping) else dict(variances)
    if len(items) != len(Stage):
        raise ValueError(f"need exactly {len(Stage)} clusters, got {len(items)}")
    vals = np.array(list(items.values()), dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("cluster variances must be finite")
    low_confidence = len(np.unique(vals)) < len(vals)
    if low_confidence:
        log.warning("tied cluster variances %s; ranking by cluster id", vals.tolist())
    order = sorted(items, key=lambda c: (items[c], c))
    return {c: Stage(rank) for rank, c in enumerate(order)}, low_confidence


@dataclass
class TargetStaging:
    assignment: StageAssignment
    clusters: ClusterResult
    stats: list
    mapping: dict
    low_confidence: bool


def assign_target_stages(X, gamma: float = 0.1, max_iter: int = 50, seed=None) -> TargetStaging:
    """Cluster target windows into three groups and name them by variance."""
    X = check_windows(X)
    clusters = kmeans_softdtw(X, len(Stage), gamma, max_iter, seed)
    stats = [cluster_variance(X[clusters.assignments == c]) for c in range(clusters.k)]
    mapping, low = rank_stages([s.total_variance for s in stats])
    stages = np.array([int(mapping[c]) for c in clusters.assignments], dtype=np.int64)
    return TargetStaging(StageAssignment(stages, "cluster-variance"), clusters, stats, mapping, low)


@dataclass
class StagePair:
    stage: Stage
    source_idx: np.ndarray
    target_idx: np.ndarray


def pair_stages(source: StageAssignment, target: StageAssignment) -> list[StagePair]:
    """Same-stage (source, target) subsets in Sluggish -> Accelerated -> Terminal order.

    A stage empty on either side is skipped with a warning.
    """
    pairs = []
    for stage in Stage:
        s_idx, t_idx = source.indices(stage), target.indices(stage)
        if len(s_idx) == 0 or len(t_idx) == 0:
            side = "source" if len(s_idx) == 0 else "target"
            warnings.warn(f"{stage.name} stage empty on the {side} side; pair skipped", stacklevel=2)
            continue
        pairs.append(StagePair(stage, s_idx, t_idx))
    return pairs
