"""Variograms, ordinary kriging and regression-kriging.

Regression-kriging models ln(PSMP) as a linear trend in the price factors
plus a spatially correlated residual. The residual is interpolated by
ordinary kriging with an exponential semivariogram fitted to the OLS
residuals, and the two parts are summed before exponentiating.
"""

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import minimize
from scipy.spatial import ConvexHull, QhullError, cKDTree
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_vector, as_xy
from .exceptions import AppraisalError, DataError, DegenerateDataWarning, SingularSystemError
from .linmodel import jarque_bera, ols_fit, predict as ols_predict

_PAIR_BLOCK = 4_000_000


# ---------------------------------------------------------------------------
# pair enumeration

def max_pairwise_distance(xy):
    xy = as_xy(xy)
    if xy.shape[0] < 2:
        return 0.0
    pts = xy
    if xy.shape[0] > 3:
        try:
            pts = xy[ConvexHull(xy).vertices]
        except QhullError:
            pass
    best = 0.0
    block = max(1, _PAIR_BLOCK // pts.shape[0])
    for s in range(0, pts.shape[0], block):
        d = np.sqrt(((pts[s:s + block, None, :] - pts[None, :, :]) ** 2).sum(-1))
        best = max(best, float(d.max()))
    return best


def _iter_pairs(xy, max_dist):
    """Yield (i_idx, j_idx, distance) blocks for pairs i < j with d <= max_dist."""
    n = xy.shape[0]
    block = max(1, _PAIR_BLOCK // max(n, 1))
    for s in range(0, n, block):
        e = min(n, s + block)
        d = np.sqrt(((xy[s:e, None, :] - xy[None, s:, :]) ** 2).sum(-1))
        ii, jj = np.nonzero(d <= max_dist)
        jj_abs = jj + s
        keep = jj_abs > ii + s
        yield ii[keep] + s, jj_abs[keep], d[ii[keep], jj[keep]]


def _bin_of(d, max_dist, n_bins):
    width = max_dist / n_bins
    return np.minimum((d / width).astype(np.int64), n_bins - 1)


# ---------------------------------------------------------------------------
# empirical variogram

@dataclass(frozen=True, eq=False)
class EmpiricalVariogram:
    lags: np.ndarray
    gamma: np.ndarray
    counts: np.ndarray
    bin_edges: np.ndarray
    valid: np.ndarray
    max_dist: float
    variance: float

    def to_csv(self, model=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lag_m", "gamma", "pairs", "valid", "model_gamma"])
        for h, g, c, v in zip(self.lags, self.gamma, self.counts, self.valid):
            mg = "" if model is None else repr(float(model(h)))
            w.writerow([repr(float(h)), repr(float(g)), int(c), int(bool(v)), mg])
        return buf.getvalue()


def empirical_variogram(xy, values, n_lags=15, max_dist=None, min_pairs=1):
    """Semivariance γ(h) = Σ(z_i − z_j)² / (2 N(h)) over equal-width lag bins.

    ``max_dist`` defaults to half the largest pairwise distance. Bins with
    fewer than ``min_pairs`` pairs are flagged invalid and excluded from
    fitting.
    """
    xy = as_xy(xy)
    z = as_float_vector(values, "values")
    if xy.shape[0] != z.shape[0]:
        raise DataError("xy and values differ in length")
    if n_lags < 1:
        raise DataError("n_lags must be at least 1")
    n = z.shape[0]
    if n < 30:
        warnings.warn(f"empirical variogram from only {n} points", DegenerateDataWarning, stacklevel=2)
    if max_dist is None:
        max_dist = 0.5 * max_pairwise_distance(xy)
    max_dist = float(max_dist)
    if not max_dist > 0:
        raise DataError("max_dist must be positive")
    counts = np.zeros(n_lags)
    sum_d = np.zeros(n_lags)
    sum_sq = np.zeros(n_lags)
    for i, j, d in _iter_pairs(xy, max_dist):
        b = _bin_of(d, max_dist, n_lags)
        counts += np.bincount(b, minlength=n_lags)
        sum_d += np.bincount(b, weights=d, minlength=n_lags)
        sum_sq += np.bincount(b, weights=(z[i] - z[j]) ** 2, minlength=n_lags)
    edges = np.linspace(0.0, max_dist, n_lags + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    populated = counts > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        lags = np.where(populated, sum_d / counts, centers)
        gamma = np.where(populated, sum_sq / (2.0 * counts), np.nan)
    return EmpiricalVariogram(lags=lags, gamma=gamma, counts=counts.astype(np.int64),
                              bin_edges=edges, valid=counts >= max(min_pairs, 1),
                              max_dist=max_dist, variance=float(np.var(z)))


# ---------------------------------------------------------------------------
# exponential model

@dataclass(frozen=True)
class VariogramModel:
    """γ(h) = nugget + partial_sill · (1 − exp(−h / range_param))."""

    nugget: float
    partial_sill: float
    range_param: float
    kind: str = "exponential"

    def __post_init__(self):
        if self.kind != "exponential":
            raise DataError(f"unsupported variogram kind {self.kind!r}")
        if self.nugget < 0 or self.partial_sill < 0 or not self.range_param > 0:
            raise DataError(f"inadmissible variogram parameters {self}")

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        return self.nugget + self.partial_sill * (1.0 - np.exp(-h / self.range_param))

    @property
    def sill(self):
        return self.nugget + self.partial_sill

    @property
    def effective_range(self):
        """Distance where γ reaches 95% of the partial sill above the nugget."""
        return 3.0 * self.range_param

    def to_dict(self):
        return {"kind": self.kind, "nugget": self.nugget, "partial_sill": self.partial_sill,
                "range_param": self.range_param}

    @classmethod
    def from_dict(cls, d):
        return cls(nugget=float(d["nugget"]), partial_sill=float(d["partial_sill"]),
                   range_param=float(d["range_param"]), kind=d.get("kind", "exponential"))


def fit_exponential(empirical, max_restarts=6):
    """Pair-weighted least-squares fit of the exponential model.

    Bounded Nelder-Mead from a deterministic start (nugget = first-bin γ,
    sill = data variance, range = max_dist / 3), restarted from its own
    optimum until the objective stops improving.
    """
    ok = empirical.valid & np.isfinite(empirical.gamma)
    if ok.sum() < 3:
        raise DataError(f"need at least 3 valid lag bins to fit a variogram, have {int(ok.sum())}")
    h = empirical.lags[ok]
    g = empirical.gamma[ok]
    wts = empirical.counts[ok].astype(float)
    md = empirical.max_dist
    gmax = float(max(g.max(), empirical.variance))
    if gmax == 0:
        return VariogramModel(0.0, 0.0, md / 3.0)

    # optimize in units of (gmax, gmax, max_dist) so simplex steps are comparable
    lo = np.array([0.0, 0.0, 1e-3])
    hi = np.array([2.0, 2.0, 2.0])
    nug0 = min(float(g[0]), gmax) / gmax
    ps0 = max(empirical.variance / gmax - nug0, 0.05)
    x0 = np.clip(np.array([nug0, ps0, 1.0 / 3.0]), lo, hi)
    wsum = wts.sum()

    def objective(theta):
        nug, ps, rg = theta
        model = nug + ps * (1.0 - np.exp(-h / (rg * md)))
        return float(np.sum(wts * (model - g / gmax) ** 2) / wsum)

    best = None
    start = x0
    for _ in range(max_restarts):
        simplex = [start]
        for k in range(3):
            v = start.copy()
            v[k] = v[k] + 0.1 if v[k] + 0.1 <= hi[k] else v[k] - 0.1
            simplex.append(v)
        res = minimize(objective, start, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                       options={"initial_simplex": np.array(simplex), "xatol": 1e-10,
                                "fatol": 1e-14, "maxiter": 4000, "maxfev": 8000})
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
            raise AppraisalError(f"variogram fit failed: {res.message}")
        if best is not None and res.fun >= best.fun * (1 - 1e-10):
            if res.fun < best.fun:
                best = res
            break
        best = res
        start = np.clip(res.x, lo, hi)
    nug, ps, rg = np.clip(best.x, lo, hi)
    return VariogramModel(nugget=float(nug * gmax), partial_sill=float(ps * gmax),
                          range_param=float(rg * md))


# ---------------------------------------------------------------------------
# ordinary kriging

def _gamma_of_dist(model, d):
    """Model semivariance with γ = 0 at exactly zero separation."""
    g = model(d)
    return np.where(d == 0.0, 0.0, g)


def _dedupe(xy, z):
    uniq, inv = np.unique(xy, axis=0, return_inverse=True)
    inv = inv.ravel()
    if uniq.shape[0] == xy.shape[0]:
        return xy, z
    sums = np.bincount(inv, weights=z, minlength=uniq.shape[0])
    cnt = np.bincount(inv, minlength=uniq.shape[0])
    return uniq, sums / cnt


class OrdinaryKriging(RegressorMixin, BaseEstimator):
    """Ordinary kriging with an exponential variogram.

    Parameters
    ----------
    variogram : VariogramModel, optional
        Fixed model. When None, an exponential model is fitted to the
        empirical variogram of the training values.
    n_neighbors : int, optional
        Number of nearest training points per query. None uses every point
        when there are at most ``full_threshold`` of them and 32 otherwise.
    full_threshold : int
    n_lags, max_dist :
        Passed to :func:`empirical_variogram` when fitting the variogram.
    """

    def __init__(self, variogram=None, n_neighbors=None, full_threshold=1000, n_lags=15,
                 max_dist=None):
        self.variogram = variogram
        self.n_neighbors = n_neighbors
        self.full_threshold = full_threshold
        self.n_lags = n_lags
        self.max_dist = max_dist

    def fit(self, X, y):
        xy = as_xy(X, "coords")
        z = as_float_vector(y, "values")
        if xy.shape[0] != z.shape[0]:
            raise DataError("coords and values differ in length")
        if self.variogram is None:
            if np.ptp(z) == 0:
                self.variogram_ = VariogramModel(0.0, 0.0, 1.0)
                self.empirical_ = None
            else:
                self.empirical_ = empirical_variogram(xy, z, self.n_lags, self.max_dist)
                self.variogram_ = fit_exponential(self.empirical_)
        else:
            self.variogram_ = self.variogram
            self.empirical_ = None
        self.coords_, self.values_ = _dedupe(xy, z)
        n = self.coords_.shape[0]
        if self.n_neighbors is None:
            k = n if n <= self.full_threshold else 32
        else:
            k = int(self.n_neighbors)
        self.k_ = max(1, min(k, n))
        self.tree_ = cKDTree(self.coords_)
        self._lu = None
        return self

    def _full_lu(self):
        if self._lu is None:
            n = self.coords_.shape[0]
            d = np.sqrt(((self.coords_[:, None, :] - self.coords_[None, :, :]) ** 2).sum(-1))
            A = np.ones((n + 1, n + 1))
            A[:n, :n] = _gamma_of_dist(self.variogram_, d)
            A[n, n] = 0.0
            try:
                lu = scipy.linalg.lu_factor(A, check_finite=True)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise SingularSystemError(f"kriging system is singular: {exc}") from None
            if np.any(np.diag(lu[0]) == 0):
                raise SingularSystemError("kriging system is singular")
            self._lu = lu
        return self._lu

    def weights(self, query):
        """Kriging weights, neighbor indices and Lagrange multipliers per query."""
        check_is_fitted(self, "coords_")
        q = as_xy(query, "query")
        n = self.coords_.shape[0]
        if self.variogram_.sill == 0:
            idx = np.broadcast_to(np.arange(n), (q.shape[0], n)) if self.k_ >= n else \
                self.tree_.query(q, k=self.k_)[1].reshape(q.shape[0], -1)
            w = np.full(idx.shape, 1.0 / idx.shape[1])
            return w, np.asarray(idx), np.zeros(q.shape[0]), np.zeros(idx.shape)
        if self.k_ >= n:
            lu = self._full_lu()
            d0 = np.sqrt(((q[:, None, :] - self.coords_[None, :, :]) ** 2).sum(-1))
            g0 = _gamma_of_dist(self.variogram_, d0)
            rhs = np.vstack([g0.T, np.ones((1, q.shape[0]))])
            sol = scipy.linalg.lu_solve(lu, rhs)
            idx = np.broadcast_to(np.arange(n), (q.shape[0], n))
            return sol[:n].T, idx, sol[n], g0
        k = self.k_
        _, idx = self.tree_.query(q, k=k)
        idx = idx.reshape(q.shape[0], k)
        pts = self.coords_[idx]
        dd = np.sqrt(((pts[:, :, None, :] - pts[:, None, :, :]) ** 2).sum(-1))
        A = np.ones((q.shape[0], k + 1, k + 1))
        A[:, :k, :k] = _gamma_of_dist(self.variogram_, dd)
        A[:, k, k] = 0.0
        d0 = np.sqrt(((pts - q[:, None, :]) ** 2).sum(-1))
        g0 = _gamma_of_dist(self.variogram_, d0)
        b = np.concatenate([g0, np.ones((q.shape[0], 1))], axis=1)
        try:
            sol = np.linalg.solve(A, b[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"kriging system is singular: {exc}") from None
        return sol[:, :k], idx, sol[:, k], g0

    def predict(self, X, return_variance=False, chunk=2000):
        check_is_fitted(self, "coords_")
        q = as_xy(X, "query")
        preds = np.empty(q.shape[0])
        var = np.empty(q.shape[0])
        for s in range(0, q.shape[0], chunk):
            w, idx, mu, g0 = self.weights(q[s:s + chunk])
            preds[s:s + chunk] = np.sum(w * self.values_[idx], axis=1)
            var[s:s + chunk] = np.maximum(np.sum(w * g0, axis=1) + mu, 0.0)
        if return_variance:
            return preds, var
        return preds

    def to_dict(self):
        check_is_fitted(self, "coords_")
        return {"variogram": self.variogram_.to_dict(), "k": self.k_,
                "coords": self.coords_.tolist(), "values": self.values_.tolist()}

    @classmethod
    def from_dict(cls, d):
        model = VariogramModel.from_dict(d["variogram"])
        ok = cls(variogram=model, n_neighbors=d["k"])
        return ok.fit(np.asarray(d["coords"], dtype=float), np.asarray(d["values"], dtype=float))


def krige(model, query_xy):
    """Ordinary-kriging prediction and variance (floored at 0) at query points."""
    return model.predict(query_xy, return_variance=True)


# ---------------------------------------------------------------------------
# spatial continuity and stationarity

@dataclass(frozen=True, eq=False)
class Correlogram:
    lags: np.ndarray
    correlation: np.ndarray
    pairs: np.ndarray
    flagged: np.ndarray

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lag_m", "correlation", "pairs", "flagged"])
        for row in zip(self.lags, self.correlation, self.pairs, self.flagged):
            w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(bool(row[3]))])
        return buf.getvalue()


def correlogram(xy, values, n_bins=15, max_dist=None):
    """Pearson correlation of value pairs per distance bin.

    Each pair enters in both orders, so the statistic is symmetric. Bins with
    fewer than two pairs or zero variance are flagged and carry NaN.
    """
    xy = as_xy(xy)
    z = as_float_vector(values, "values")
    if max_dist is None:
        max_dist = 0.5 * max_pairwise_distance(xy)
    max_dist = float(max_dist)
    cnt = np.zeros(n_bins)
    sd = np.zeros(n_bins)
    s1 = np.zeros(n_bins)
    s2 = np.zeros(n_bins)
    s12 = np.zeros(n_bins)
    for i, j, d in _iter_pairs(xy, max_dist):
        b = _bin_of(d, max_dist, n_bins)
        cnt += np.bincount(b, minlength=n_bins)
        sd += np.bincount(b, weights=d, minlength=n_bins)
        s1 += np.bincount(b, weights=z[i] + z[j], minlength=n_bins)
        s2 += np.bincount(b, weights=z[i] ** 2 + z[j] ** 2, minlength=n_bins)
        s12 += np.bincount(b, weights=2.0 * z[i] * z[j], minlength=n_bins)
    edges = np.linspace(0.0, max_dist, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    with np.errstate(invalid="ignore", divide="ignore"):
        m = s1 / (2 * cnt)
        var = s2 / (2 * cnt) - m ** 2
        cov = s12 / (2 * cnt) - m ** 2
        lags = np.where(cnt > 0, sd / cnt, centers)
        scale = np.maximum(s2 / (2 * cnt), 1e-300)
        flagged = (cnt < 2) | ~(var > 1e-12 * scale)
        corr = np.where(flagged, np.nan, cov / var)
    return Correlogram(lags=lags, correlation=corr, pairs=cnt.astype(np.int64), flagged=flagged)


@dataclass(frozen=True, eq=False)
class StationarityReport:
    jb: float
    p_value: float
    passed: bool
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def stationarity_check(residuals, alpha=0.05, bins=20):
    """Normality of trend residuals as the practical stationarity criterion."""
    e = as_float_vector(residuals, "residuals")
    jb, p = jarque_bera(e)
    counts, edges = np.histogram(e, bins=bins)
    return StationarityReport(jb=jb, p_value=p, passed=bool(p > alpha),
                              hist_counts=counts, hist_edges=edges)


# ---------------------------------------------------------------------------
# regression-kriging

class RegressionKriging(RegressorMixin, BaseEstimator):
    """OLS trend on ln(PSMP) plus ordinary kriging of the OLS residuals.

    ``fit(X, y_log, coords=xy)``; ``predict(X, coords=xy)`` returns PSMP,
    i.e. exp(trend + kriged residual). ``bias_correction`` adds half the
    kriging variance before exponentiating (off by default).
    """

    def __init__(self, feature_names=None, n_lags=15, max_dist=None, n_neighbors=None,
                 full_threshold=1000, bias_correction=False, alpha=0.05):
        self.feature_names = feature_names
        self.n_lags = n_lags
        self.max_dist = max_dist
        self.n_neighbors = n_neighbors
        self.full_threshold = full_threshold
        self.bias_correction = bias_correction
        self.alpha = alpha

    def fit(self, X, y, coords=None):
        if coords is None:
            raise DataError("RegressionKriging.fit requires coords")
        self.ols_ = ols_fit(X, y, feature_names=self.feature_names)
        resid = self.ols_.residuals
        if resid.shape[0] >= 8 and np.ptp(resid) > 0:
            self.stationarity_ = stationarity_check(resid, alpha=self.alpha)
            if not self.stationarity_.passed:
                warnings.warn(
                    f"trend residuals fail the normality check (p={self.stationarity_.p_value:.3g})",
                    DegenerateDataWarning, stacklevel=2)
        else:
            self.stationarity_ = None
        self.kriging_ = OrdinaryKriging(n_neighbors=self.n_neighbors, full_threshold=self.full_threshold,
                                        n_lags=self.n_lags, max_dist=self.max_dist).fit(coords, resid)
        self.n_features_in_ = len(self.ols_.coef)
        return self

    def predict_components(self, X, coords):
        check_is_fitted(self, "kriging_")
        trend = ols_predict(self.ols_, X)
        resid, var = self.kriging_.predict(coords, return_variance=True)
        return trend, resid, var

    def predict(self, X, coords=None, log=False):
        if coords is None:
            raise DataError("RegressionKriging.predict requires coords")
        trend, resid, var = self.predict_components(X, coords)
        out = trend + resid
        if self.bias_correction:
            out = out + 0.5 * var
        return out if log else np.exp(out)

    def score(self, X, y, coords=None):
        from sklearn.metrics import r2_score
        return r2_score(y, self.predict(X, coords=coords, log=True))


def rk_fit(X, y_log, xy, ols_feature_names=None, **params):
    """Fit the trend and the residual kriging model; returns (OlsFit, OrdinaryKriging)."""
    rk = RegressionKriging(feature_names=ols_feature_names, **params).fit(X, y_log, coords=xy)
    return rk.ols_, rk.kriging_


def rk_predict(models, X_query, xy_query):
    """PSMP = exp(OLS trend + kriged residual)."""
    fit, kriging = models
    return np.exp(ols_predict(fit, X_query) + kriging.predict(xy_query))
