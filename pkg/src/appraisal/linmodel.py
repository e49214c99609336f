"""Ordinary least squares with a full diagnostic block.

The fit reports what an appraiser checks before trusting a hedonic model:
coefficient significance, overall F test, adjusted R², Durbin-Watson,
Jarque-Bera normality, variance inflation factors and the condition number.
"""

import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_matrix, as_float_vector, feature_names_for
from .exceptions import DataError, RankDeficiencyError

RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class OlsFit:
    """Result of :func:`ols_fit`. Parameter arrays start with the intercept."""

    names: tuple
    params: np.ndarray
    std_errors: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    r2: float
    r2_adj: float
    f_stat: float
    f_pvalue: float
    durbin_watson: float
    jarque_bera: float
    jb_pvalue: float
    skew: float
    kurtosis: float
    condition_number: float
    residuals: np.ndarray
    fitted: np.ndarray
    n_obs: int
    df_resid: int

    @property
    def intercept(self):
        return float(self.params[0])

    @property
    def coef(self):
        return self.params[1:]

    @property
    def feature_names(self):
        return list(self.names[1:])

    def predict(self, X):
        return predict(self, X)

    def summary(self, title="OLS Regression Results", descriptions=None):
        return format_summary(self, title=title, descriptions=descriptions)

    def to_dict(self):
        d = {}
        for k, v in asdict(self).items():
            d[k] = v.tolist() if isinstance(v, np.ndarray) else (list(v) if isinstance(v, tuple) else v)
        return d

    @classmethod
    def from_dict(cls, d):
        arrays = {"params", "std_errors", "t_stats", "p_values", "residuals", "fitted"}
        kw = {k: (np.asarray(v, dtype=float) if k in arrays else v) for k, v in d.items()}
        kw["names"] = tuple(kw["names"])
        return cls(**kw)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=True)


def _design(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def _check_rank(D, names):
    """Raise naming the columns that are linear combinations of the others."""
    _, R, piv = scipy.linalg.qr(D, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * diag[0] * max(D.shape))) if diag.size else 0
    if rank < D.shape[1]:
        dependent = [names[i] for i in piv[rank:]]
        raise RankDeficiencyError(
            f"design matrix has rank {rank} < {D.shape[1]}; dependent columns: {dependent}",
            dependent_columns=dependent,
        )


def ols_fit(X, y, feature_names=None):
    """Fit y = b0 + X b by least squares and compute the diagnostic block.

    Standard errors use s² (XᵀX)⁻¹ with s² = RSS / (n - p - 1); p-values come
    from the two-sided t distribution and the F(p, n - p - 1) distribution.
    """
    names = feature_names_for(X, feature_names)
    X = as_float_matrix(X)
    y = as_float_vector(y)
    n, p = X.shape
    if y.shape[0] != n:
        raise DataError(f"X has {n} rows but y has {y.shape[0]}")
    if n <= p + 1:
        raise DataError(f"need n > p + 1 observations, got n={n}, p={p}")
    full_names = ["const"] + names
    D = _design(X)
    _check_rank(D, full_names)

    Q, R = np.linalg.qr(D)
    params = scipy.linalg.solve_triangular(R, Q.T @ y)
    fitted = D @ params
    resid = y - fitted
    df_resid = n - p - 1
    rss = float(resid @ resid)
    tss = float(np.sum((y - y.mean()) ** 2))
    s2 = rss / df_resid
    Rinv = scipy.linalg.solve_triangular(R, np.eye(p + 1))
    cov_unscaled = Rinv @ Rinv.T
    se = np.sqrt(s2 * np.diag(cov_unscaled))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = params / se
    t = np.where(se == 0, np.sign(params) * np.inf, t)
    pvals = np.clip(2.0 * stats.t.sf(np.abs(t), df_resid), 0.0, 1.0)

    if tss > 0:
        r2 = 1.0 - rss / tss
    else:
        r2 = float("nan")
    r2_adj = 1.0 - (1.0 - r2) * (n - 1) / df_resid
    if p == 0 or not tss > 0:
        f_stat, f_p = float("nan"), float("nan")
    elif rss == 0:
        f_stat, f_p = float("inf"), 0.0
    else:
        f_stat = ((tss - rss) / p) / s2
        f_p = float(stats.f.sf(f_stat, p, df_resid))

    dw = durbin_watson(resid) if rss > 0 else float("nan")
    if rss > 0 and n >= 8:
        jb, jb_p, skew, kurt = _jb_parts(resid)
    else:
        jb = jb_p = skew = kurt = float("nan")
    return OlsFit(
        names=tuple(full_names), params=params, std_errors=se, t_stats=t, p_values=pvals,
        r2=float(r2), r2_adj=float(r2_adj), f_stat=float(f_stat), f_pvalue=float(f_p),
        durbin_watson=float(dw), jarque_bera=float(jb), jb_pvalue=float(jb_p),
        skew=float(skew), kurtosis=float(kurt), condition_number=condition_number(D),
        residuals=resid, fitted=fitted, n_obs=n, df_resid=df_resid,
    )


def predict(fit, X):
    """Intercept plus X times the slope coefficients."""
    X = as_float_matrix(X)
    if X.shape[1] != len(fit.params) - 1:
        raise DataError(f"model has {len(fit.params) - 1} features, X has {X.shape[1]} columns")
    return fit.params[0] + X @ fit.params[1:]


def durbin_watson(residuals):
    """Σ(e_t − e_{t−1})² / Σe_t² in the given row order."""
    e = as_float_vector(residuals, "residuals", min_len=2)
    denom = float(e @ e)
    if denom == 0:
        raise DataError("Durbin-Watson is undefined for all-zero residuals")
    d = np.diff(e)
    return float(d @ d) / denom


def _jb_parts(e):
    n = e.shape[0]
    c = e - e.mean()
    m2 = float(np.mean(c ** 2))
    if m2 == 0:
        raise DataError("Jarque-Bera is undefined for zero-variance residuals")
    skew = float(np.mean(c ** 3)) / m2 ** 1.5
    kurt = float(np.mean(c ** 4)) / m2 ** 2
    jb = n / 6.0 * (skew ** 2 + (kurt - 3.0) ** 2 / 4.0)
    return jb, math.exp(-jb / 2.0), skew, kurt


def jarque_bera(residuals):
    """Jarque-Bera statistic and its χ²(2) p-value, exp(−JB/2).

    Skewness and kurtosis use biased (population) moments.
    """
    e = as_float_vector(residuals, "residuals", min_len=2)
    if e.shape[0] < 8:
        raise DataError(f"Jarque-Bera needs at least 8 residuals, got {e.shape[0]}")
    jb, p, _, _ = _jb_parts(e)
    return jb, p


def vif(X, feature_names=None):
    """Variance inflation factor per column; +inf flags perfect collinearity."""
    names = feature_names_for(X, feature_names)
    X = as_float_matrix(X)
    if X.shape[1] < 2:
        raise DataError("VIF needs at least two features")
    out = {}
    for j, name in enumerate(names):
        target = X[:, j]
        others = _design(np.delete(X, j, axis=1))
        coef, *_ = np.linalg.lstsq(others, target, rcond=None)
        resid = target - others @ coef
        tss = float(np.sum((target - target.mean()) ** 2))
        rss = float(resid @ resid)
        if tss == 0 or rss <= 1e-12 * tss:
            out[name] = float("inf")
        else:
            out[name] = tss / rss  # = 1 / (1 - R²_j)
    return out


def condition_number(X):
    """Ratio of largest to smallest singular value; +inf when singular."""
    X = as_float_matrix(X)
    s = np.linalg.svd(X, compute_uv=False)
    if s[-1] <= s[0] * max(X.shape) * np.finfo(float).eps:
        return float("inf")
    return float(s[0] / s[-1])


def homoscedasticity_data(fit):
    """Residuals against their row number, for a residual-vs-order plot."""
    return np.arange(len(fit.residuals)), np.asarray(fit.residuals)


def _fmt_p(p):
    if not np.isfinite(p):
        return "nan"
    return "<<0.001" if p < 0.001 else f"{p:.3f}"


def format_summary(fit, title="OLS Regression Results", descriptions=None):
    """Plain-text table: header statistics, coefficients, residual diagnostics."""
    descriptions = descriptions or {}
    buf = io.StringIO()
    w = 64
    buf.write(title.center(w) + "\n" + "=" * w + "\n")
    buf.write(f"{'No. observations:':<22}{fit.n_obs:>10d}   {'R²:':<14}{fit.r2:>10.3f}\n")
    buf.write(f"{'Df residuals:':<22}{fit.df_resid:>10d}   {'R²adj:':<14}{fit.r2_adj:>10.3f}\n")
    buf.write(f"{'F-statistic:':<22}{fit.f_stat:>10.2f}   {'p(F):':<14}{_fmt_p(fit.f_pvalue):>10}\n")
    buf.write("-" * w + "\n")
    buf.write(f"{'':<12}{'coef':>12}{'std err':>12}{'t':>12}{'P>|t|':>12}\n")
    for i, name in enumerate(fit.names):
        buf.write(f"{name:<12}{fit.params[i]:>12.4f}{fit.std_errors[i]:>12.3f}"
                  f"{fit.t_stats[i]:>12.3f}{_fmt_p(fit.p_values[i]):>12}\n")
    for name in fit.names[1:]:
        if name in descriptions:
            buf.write(f"{name} is {descriptions[name]}\n")
    buf.write("-" * w + "\n")
    buf.write(f"{'Durbin-Watson:':<22}{fit.durbin_watson:>10.3f}\n")
    buf.write(f"{'Jarque-Bera (JB):':<22}{fit.jarque_bera:>10.3f}\n")
    buf.write(f"{'p-value (JB):':<22}{_fmt_p(fit.jb_pvalue):>10}\n")
    buf.write(f"{'Cond. No.:':<22}{fit.condition_number:>10.2f}\n")
    buf.write("=" * w + "\n")
    return buf.getvalue()


class OLSRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`ols_fit`.

    After ``fit`` the full diagnostic block is available as ``fit_``.
    """

    def __init__(self, feature_names=None):
        self.feature_names = feature_names

    def fit(self, X, y):
        self.fit_ = ols_fit(X, y, feature_names=self.feature_names)
        self.intercept_ = self.fit_.intercept
        self.coef_ = np.asarray(self.fit_.coef)
        self.n_features_in_ = len(self.coef_)
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return predict(self.fit_, X)

    def summary(self, **kw):
        check_is_fitted(self, "fit_")
        return self.fit_.summary(**kw)
