"""Error metrics and k-fold cross-validation of the model recipes."""

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from joblib import Parallel, delayed

from ._validation import as_float_vector, check_same_length
from .exceptions import DataError


def _pair(y, y_pred):
    y = as_float_vector(y, "y_true")
    y_pred = as_float_vector(y_pred, "y_pred")
    check_same_length(y, y_pred)
    return y, y_pred


def mae(y, y_pred):
    """Mean absolute error."""
    y, y_pred = _pair(y, y_pred)
    return float(np.mean(np.abs(y - y_pred)))


def mape(y, y_pred):
    """Mean absolute percentage error in percent, relative to y (not |y|)."""
    y, y_pred = _pair(y, y_pred)
    zero = np.flatnonzero(y == 0)
    if zero.size:
        raise DataError(f"MAPE undefined: y is zero at index {int(zero[0])}")
    return float(np.mean(np.abs(y - y_pred) / y) * 100.0)


def r2(y, y_pred):
    y, y_pred = _pair(y, y_pred)
    tss = float(np.sum((y - y.mean()) ** 2))
    if tss == 0:
        raise DataError("R² undefined: y has zero total sum of squares")
    return 1.0 - float(np.sum((y - y_pred) ** 2)) / tss


def r2_adj(y, y_pred, p):
    """1 − (1 − R²)(n − 1)/(n − p − 1)."""
    y, y_pred = _pair(y, y_pred)
    n = y.shape[0]
    if n <= p + 1:
        raise DataError(f"adjusted R² needs n > p + 1 (n={n}, p={p})")
    return 1.0 - (1.0 - r2(y, y_pred)) * (n - 1) / (n - p - 1)


@dataclass(frozen=True)
class MetricReport:
    mae: float
    mape: float
    r2_adj: float
    n: int
    model: str = ""
    dataset: str = ""
    split: str = ""

    @classmethod
    def compute(cls, y, y_pred, p, model="", dataset="", split=""):
        y, y_pred = _pair(y, y_pred)
        adj = r2_adj(y, y_pred, p) if y.shape[0] > p + 1 else float("nan")
        return cls(mae(y, y_pred), mape(y, y_pred), adj, int(y.shape[0]), model, dataset, split)

    def to_dict(self):
        return asdict(self)


FIELDS = ("model", "dataset", "split", "n", "mae", "mape", "r2_adj")


def reports_to_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in reports:
        w.writerow([r.model, r.dataset, r.split, r.n, repr(r.mae), repr(r.mape), repr(r.r2_adj)])
    return buf.getvalue()


def reports_to_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True)


def format_reports(reports, title="Model quality"):
    lines = [title, f"{'model':<10} {'split':<8} {'n':>6} {'R2adj':>8} {'MAE':>12} {'MAPE,%':>8}"]
    for r in reports:
        lines.append(f"{r.model:<10} {r.split:<8} {r.n:>6} {r.r2_adj:>8.3f} {r.mae:>12.2f} {r.mape:>8.2f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# recipes: (train table, test table, params) -> (PSMP predictions, parameter count)

def _to_psmp(table, pred):
    return np.exp(pred) if table.target_kind == "log_psmp" else pred


def _recipe_ols(train, test, params):
    from .linmodel import ols_fit, predict
    fit = ols_fit(train.matrix, train.target, feature_names=train.names)
    return _to_psmp(train, predict(fit, test.matrix)), len(train.names)


def _recipe_rk(train, test, params):
    from .geostat import RegressionKriging
    if train.target_kind != "log_psmp":
        raise DataError("regression-kriging expects a ln(PSMP) target")
    if train.coords is None:
        raise DataError("regression-kriging needs coordinates")
    rk = RegressionKriging(feature_names=train.names, **params).fit(train.matrix, train.target,
                                                                       coords=train.coords)
    return rk.predict(test.matrix, coords=test.coords), len(train.names)


def _recipe_rulefit(train, test, params):
    from .rulefit import rulefit_fit, rulefit_predict
    model = rulefit_fit(train, params)
    return _to_psmp(train, rulefit_predict(model, test.matrix)), len(model.terms)


def _recipe_forest(train, test, params):
    from .trees import ForestRegressor
    est = ForestRegressor(**params).fit(train.matrix, train.target)
    return _to_psmp(train, est.predict(test.matrix)), len(train.names)


RECIPES = {"ols": _recipe_ols, "rk": _recipe_rk, "rulefit": _recipe_rulefit, "forest": _recipe_forest}
MIN_TRAIN = {"ols": lambda p: p + 2, "rk": lambda p: p + 2, "rulefit": lambda p: 2, "forest": lambda p: 2}


def fit_and_score(recipe, train, test, params=None, dataset="", split="test"):
    """Fit a recipe on ``train`` and report PSMP-scale metrics on ``test``."""
    fn = RECIPES[recipe] if isinstance(recipe, str) else recipe
    pred, p = fn(train, test, dict(params or {}))
    tag = recipe if isinstance(recipe, str) else getattr(recipe, "__name__", "custom")
    return MetricReport.compute(test.psmp(), pred, p, tag, dataset, split), pred


@dataclass(frozen=True)
class CVResult:
    folds: tuple
    mean: MetricReport
    fold_indices: tuple
    predictions: np.ndarray


def kfold_cv(model_recipe, table, k=5, seed=0, params=None, n_jobs=1, dataset=""):
    """k-fold cross-validation of a recipe.

    ``model_recipe`` is one of ``"ols"``, ``"rk"``, ``"rulefit"``,
    ``"forest"`` or a callable ``(train, test, params) -> (psmp_pred, p)``.
    Metrics are in PSMP units whatever the target scale. The mean report
    averages the per-fold metrics.
    """
    from .rulefit import kfold_indices

    if k < 2:
        raise DataError("k-fold CV needs k ≥ 2")
    if isinstance(model_recipe, str) and model_recipe not in RECIPES:
        raise DataError(f"unknown recipe {model_recipe!r}; choose from {sorted(RECIPES)}")
    n = table.n_rows
    folds = kfold_indices(n, k, seed)
    if isinstance(model_recipe, str):
        need = MIN_TRAIN[model_recipe](len(table.names))
        smallest = n - max(f.size for f in folds)
        if smallest < need:
            raise DataError(f"training fold of {smallest} rows is below the {model_recipe} minimum of {need}")

    def one(i, test_idx):
        train_idx = np.setdiff1d(np.arange(n), test_idx)
        return fit_and_score(model_recipe, table.take(train_idx), table.take(test_idx), params,
                             dataset, f"cv{i}")

    results = Parallel(n_jobs=n_jobs)(delayed(one)(i, f) for i, f in enumerate(folds))
    reports = tuple(r for r, _ in results)
    pred = np.empty(n)
    for f, (_, p) in zip(folds, results):
        pred[f] = p
    tag = reports[0].model
    mean = MetricReport(float(np.mean([r.mae for r in reports])), float(np.mean([r.mape for r in reports])),
                        float(np.mean([r.r2_adj for r in reports])), n, tag, dataset, "cv_mean")
    return CVResult(reports, mean, tuple(folds), pred)
