"""CART regression trees and bootstrap forests.

Trees are stored as flat node arrays; :meth:`Tree.root` materializes the
recursive :class:`TreeNode` view. Split thresholds are midpoints between
adjacent distinct observed values, and samples with x ≤ threshold go left.
"""

from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_matrix, as_float_vector, stream_rng
from .exceptions import DataError


@dataclass(frozen=True)
class TreeNode:
    depth: int
    n_samples: int
    value: float
    feature: int = -1
    threshold: float = float("nan")
    improvement: float = 0.0
    left: "TreeNode" = None
    right: "TreeNode" = None

    @property
    def is_leaf(self):
        return self.left is None


class Tree:
    """Fitted regression tree in array form (node 0 is the root)."""

    def __init__(self, feature, threshold, left, right, value, n_samples, depth, improvement,
                 n_features):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=float)
        self.n_samples = np.asarray(n_samples, dtype=np.int64)
        self.depth = np.asarray(depth, dtype=np.int64)
        self.improvement = np.asarray(improvement, dtype=float)
        self.n_features = int(n_features)

    @property
    def node_count(self):
        return len(self.value)

    def is_leaf(self, i):
        return self.left[i] < 0

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        out = np.empty(X.shape[0])
        stack = [(0, np.arange(X.shape[0]))]
        while stack:
            node, rows = stack.pop()
            if rows.size == 0:
                continue
            if self.left[node] < 0:
                out[rows] = self.value[node]
                continue
            go_left = X[rows, self.feature[node]] <= self.threshold[node]
            stack.append((self.left[node], rows[go_left]))
            stack.append((self.right[node], rows[~go_left]))
        return out

    def root(self):
        def build(i):
            if self.left[i] < 0:
                return TreeNode(int(self.depth[i]), int(self.n_samples[i]), float(self.value[i]))
            return TreeNode(int(self.depth[i]), int(self.n_samples[i]), float(self.value[i]),
                            int(self.feature[i]), float(self.threshold[i]), float(self.improvement[i]),
                            build(self.left[i]), build(self.right[i]))
        return build(0)

    def to_dict(self):
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist(), "n_samples": self.n_samples.tolist(),
                "depth": self.depth.tolist(), "improvement": self.improvement.tolist(),
                "n_features": self.n_features}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def same_as(self, other):
        return all(np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True)
                   for a in ("feature", "threshold", "left", "right", "value", "n_samples",
                             "depth", "improvement"))


def resolve_max_features(feature_subsample, p):
    if feature_subsample is None:
        return p
    if isinstance(feature_subsample, float):
        if not 0 < feature_subsample <= 1:
            raise DataError("fractional feature_subsample must lie in (0, 1]")
        return max(1, int(round(feature_subsample * p)))
    return max(1, min(int(feature_subsample), p))


def _best_split(Xn, yn, feats, min_leaf):
    """Best variance-reduction split over ``feats``; returns (gain, feature, threshold)."""
    n = yn.shape[0]
    yc = yn - yn.mean()
    sub = Xn[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    ys = yc[order]
    s1 = np.cumsum(ys, axis=0)
    s2 = np.cumsum(ys * ys, axis=0)
    tot1, tot2 = s1[-1], s2[-1]
    pos = np.arange(min_leaf - 1, n - min_leaf)  # left holds pos+1 samples
    if pos.size == 0:
        return 0.0, -1, np.nan
    nl = (pos + 1)[:, None].astype(float)
    nr = n - nl
    l1, l2 = s1[pos], s2[pos]
    sse_l = l2 - l1 ** 2 / nl
    sse_r = (tot2 - l2) - (tot1 - l1) ** 2 / nr
    gain = tot2 - sse_l - sse_r
    distinct = xs[pos] < xs[pos + 1]
    gain = np.where(distinct, gain, -np.inf)
    # first maximal entry in (feature order, position) sequence
    flat = np.argmax(gain.T)
    fi, pi = divmod(int(flat), pos.size)
    best = float(gain[pi, fi])
    if not np.isfinite(best):
        return 0.0, -1, np.nan
    lo, hi = xs[pos[pi], fi], xs[pos[pi] + 1, fi]
    thr = 0.5 * (lo + hi)
    if not lo <= thr < hi:
        thr = lo
    return best, int(feats[fi]), float(thr)


def fit_tree(X, y, max_depth=4, min_leaf=1, feature_subsample=None, seed=0, rng=None):
    """Greedy variance-reduction regression tree.

    Each node samples ``feature_subsample`` candidate features without
    replacement. Growth stops at ``max_depth``, when a node has fewer than
    ``2 * min_leaf`` samples, or when no split improves the squared error.
    ``max_depth=None`` grows until the other rules stop it.
    """
    X = as_float_matrix(X)
    y = as_float_vector(y)
    if X.shape[0] != y.shape[0]:
        raise DataError("X and y differ in length")
    if min_leaf < 1:
        raise DataError("min_leaf must be at least 1")
    rng = np.random.default_rng(seed) if rng is None else rng
    n, p = X.shape
    m = resolve_max_features(feature_subsample, p)
    depth_cap = np.inf if max_depth is None else max_depth
    scale = float(np.sum((y - y.mean()) ** 2)) or 1.0

    feature, threshold, left, right = [], [], [], []
    value, n_samples, depth, improvement = [], [], [], []

    def new_node(idx, d):
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        n_samples.append(int(idx.size))
        depth.append(d)
        improvement.append(0.0)
        return len(value) - 1

    root = new_node(np.arange(n), 0)
    stack = [(root, np.arange(n))]
    while stack:
        node, idx = stack.pop()
        d = depth[node]
        if d >= depth_cap or idx.size < 2 * min_leaf:
            continue
        yn = y[idx]
        if np.ptp(yn) == 0:
            continue
        feats = np.sort(rng.choice(p, size=m, replace=False)) if m < p else np.arange(p)
        gain, f, thr = _best_split(X[idx], yn, feats, min_leaf)
        if f < 0 or gain <= 1e-12 * scale:
            continue
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node] = f
        threshold[node] = thr
        improvement[node] = gain
        ln = new_node(li, d + 1)
        rn = new_node(ri, d + 1)
        left[node], right[node] = ln, rn
        stack.append((rn, ri))
        stack.append((ln, li))
    return Tree(feature, threshold, left, right, value, n_samples, depth, improvement, p)


def _fit_member(X, y, t, seed, bootstrap, tree_params):
    rng = stream_rng(seed, t)
    n = X.shape[0]
    idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
    return fit_tree(X[idx], y[idx], rng=rng, **tree_params)


def fit_forest(X, y, n_trees=100, tree_params=None, seed=0, bootstrap=True, n_jobs=1):
    """Trees on bootstrap resamples; tree t draws from the stream (seed, t).

    Output is identical for any ``n_jobs``.
    """
    X = as_float_matrix(X)
    y = as_float_vector(y)
    if n_trees < 1:
        raise DataError("n_trees must be at least 1")
    params = dict(tree_params or {})
    params.pop("seed", None)
    return list(Parallel(n_jobs=n_jobs)(
        delayed(_fit_member)(X, y, t, seed, bootstrap, params) for t in range(n_trees)))


def forest_predict(forest, X):
    """Mean of the member trees' predictions."""
    X = as_float_matrix(X)
    return np.mean([t.predict(X) for t in forest], axis=0)


class RegressionTree(RegressorMixin, BaseEstimator):
    def __init__(self, max_depth=4, min_leaf=1, feature_subsample=None, seed=0):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.feature_subsample = feature_subsample
        self.seed = seed

    def fit(self, X, y):
        self.tree_ = fit_tree(X, y, self.max_depth, self.min_leaf, self.feature_subsample, self.seed)
        self.n_features_in_ = self.tree_.n_features
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        return self.tree_.predict(as_float_matrix(X))


class ForestRegressor(RegressorMixin, BaseEstimator):
    """Bootstrap forest of CART trees; the black-box baseline.

    Parameters
    ----------
    n_trees : int
    max_depth : int or None
    min_leaf : int
    feature_subsample : None, int or float
        Candidate features per split (None = all).
    bootstrap : bool
    seed : int
    n_jobs : int
        Parallel workers; never changes the result.
    """

    def __init__(self, n_trees=100, max_depth=None, min_leaf=5, feature_subsample=None,
                 bootstrap=True, seed=0, n_jobs=1):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.feature_subsample = feature_subsample
        self.bootstrap = bootstrap
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y):
        params = {"max_depth": self.max_depth, "min_leaf": self.min_leaf,
                  "feature_subsample": self.feature_subsample}
        self.trees_ = fit_forest(X, y, self.n_trees, params, self.seed, self.bootstrap, self.n_jobs)
        self.n_features_in_ = self.trees_[0].n_features
        return self

    def predict(self, X):
        check_is_fitted(self, "trees_")
        return forest_predict(self.trees_, X)

    def to_dict(self):
        check_is_fitted(self, "trees_")
        return {"params": self.get_params(), "trees": [t.to_dict() for t in self.trees_]}

    @classmethod
    def from_dict(cls, d):
        est = cls(**d["params"])
        est.trees_ = [Tree.from_dict(t) for t in d["trees"]]
        est.n_features_in_ = est.trees_[0].n_features
        return est
