"""RuleFit: a sparse linear model over the original features plus
conjunctive rules read off a tree ensemble.

The fitted model has the form

    ŷ = intercept + Σ α_i f_i

where each f_i is either a raw feature value (linear term) or a 0/1 rule
indicator. Coefficients are selected by LASSO with the penalty chosen by
cross-validation, and linear coefficients are reported in raw units.
"""

import csv
import io
import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_matrix, as_float_vector, feature_names_for
from .dataset import Scaler
from .exceptions import ConvergenceWarning, DataError
from .trees import fit_forest

OPS = ("<=", ">")


# ---------------------------------------------------------------------------
# rules

@dataclass(frozen=True)
class Condition:
    feature: int
    op: str
    threshold: float
    name: str = ""

    def holds(self, X):
        col = X[:, self.feature]
        return col <= self.threshold if self.op == "<=" else col > self.threshold

    def text(self, names=None):
        label = self.name or (names[self.feature] if names else f"x{self.feature}")
        return f"{label} {self.op} {self.threshold:.6g}"


@dataclass(frozen=True)
class Rule:
    """Conjunction of threshold conditions, at most one per (feature, op)."""

    conditions: tuple
    support: float = float("nan")
    score: float = 0.0

    @property
    def key(self):
        return tuple((c.feature, c.op, c.threshold) for c in self.conditions)

    def evaluate(self, X):
        X = np.asarray(X, dtype=float)
        out = np.ones(X.shape[0], dtype=bool)
        for c in self.conditions:
            out &= c.holds(X)
        return out

    def text(self, names=None):
        return " & ".join(c.text(names) for c in self.conditions)

    def to_dict(self):
        return {"conditions": [[c.feature, c.name, c.op, c.threshold] for c in self.conditions],
                "support": self.support, "score": self.score}

    @classmethod
    def from_dict(cls, d):
        conds = tuple(Condition(int(f), op, float(t), name) for f, name, op, t in d["conditions"])
        return cls(conds, float(d["support"]), float(d["score"]))


def merge_conditions(conditions):
    """Collapse same-feature conditions into one interval per feature."""
    upper, lower = {}, {}
    names = {}
    for c in conditions:
        names[c.feature] = c.name
        if c.op == "<=":
            upper[c.feature] = min(upper.get(c.feature, np.inf), c.threshold)
        else:
            lower[c.feature] = max(lower.get(c.feature, -np.inf), c.threshold)
    out = []
    for f in sorted(set(upper) | set(lower)):
        if f in upper:
            out.append(Condition(f, "<=", float(upper[f]), names[f]))
        if f in lower:
            out.append(Condition(f, ">", float(lower[f]), names[f]))
    return tuple(out)


def extract_rules(forest, X, rule_cap=50, feature_names=None):
    """Candidate rules from every non-root node of every tree.

    A node's rule is its root path with same-feature conditions merged. Its
    score is the impurity improvement of the split that created it, summed
    over duplicate occurrences. Rules with training support 0 or 1 are
    discarded, the rest ranked by score (ties: first seen) and capped.
    """
    X = as_float_matrix(X)
    names = feature_names or [f"x{j}" for j in range(X.shape[1])]
    found = {}
    for tree in forest:
        stack = [(0, ())]
        while stack:
            node, path = stack.pop()
            if tree.left[node] < 0:
                continue
            f, t, gain = int(tree.feature[node]), float(tree.threshold[node]), float(tree.improvement[node])
            for child, op in ((tree.left[node], "<="), (tree.right[node], ">")):
                cpath = path + (Condition(f, op, t, names[f]),)
                conds = merge_conditions(cpath)
                key = tuple((c.feature, c.op, c.threshold) for c in conds)
                if key in found:
                    found[key][1] += gain
                else:
                    found[key] = [conds, gain, len(found)]
                stack.append((child, cpath))
    n = X.shape[0]
    rules = []
    for conds, score, order in found.values():
        r = Rule(conds)
        support = float(r.evaluate(X).sum()) / n
        if 0.0 < support < 1.0:
            rules.append((score, order, Rule(conds, support, score)))
    rules.sort(key=lambda t: (-t[0], t[1]))
    return [r for _, _, r in rules[:max(int(rule_cap), 0)]]


def rule_matrix(rules, X):
    """0/1 matrix with entry 1 iff the row satisfies every condition of the rule."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DataError("X must be 2-dimensional")
    if not rules:
        return np.zeros((X.shape[0], 0))
    for r in rules:
        if not r.conditions:
            raise DataError("a rule needs at least one condition")
        for c in r.conditions:
            if c.feature >= X.shape[1]:
                raise DataError(f"rule references feature {c.feature} but X has {X.shape[1]} columns")
    return np.column_stack([r.evaluate(X) for r in rules]).astype(float)


def independent_columns(base, candidates, rtol=1e-8):
    """Indices of ``candidates`` columns not in the span of the intercept,
    ``base`` and earlier kept candidates (greedy, in column order).

    Indicators of complementary or partitioning rules are exactly collinear
    with the intercept; keeping them makes the LASSO solution non-unique and
    slows coordinate descent.
    """
    n = candidates.shape[0]
    Q = np.zeros((n, 0))
    if base.shape[1]:
        Qb, Rb = np.linalg.qr(base - base.mean(0))
        ok = np.abs(np.diag(Rb)) > rtol * max(np.abs(np.diag(Rb)).max(), 1e-300)
        Q = Qb[:, ok]
    keep = []
    for k in range(candidates.shape[1]):
        v = candidates[:, k] - candidates[:, k].mean()
        norm0 = np.linalg.norm(v)
        if norm0 == 0:
            continue
        for _ in range(2):  # re-orthogonalize once for stability
            v = v - Q @ (Q.T @ v)
        norm = np.linalg.norm(v)
        if norm > rtol * norm0 * np.sqrt(n):
            Q = np.column_stack([Q, v / norm])
            keep.append(k)
    return keep


# ---------------------------------------------------------------------------
# LASSO by coordinate descent

@dataclass(frozen=True, eq=False)
class LassoResult:
    intercept: float
    coef: np.ndarray
    n_iter: int
    converged: bool
    objective: list

    @property
    def n_nonzero(self):
        return int(np.count_nonzero(self.coef))


def lasso_objective(X, y, intercept, coef, lam):
    r = y - intercept - X @ coef
    return float(r @ r) + lam * float(np.abs(coef).sum())


def _cd_sweeps(G, c, yy, lam, w, tol, max_iter, objective):
    """Cyclic coordinate descent on Σ(y − Xw)² + lam·|w|₁ using the Gram matrix.

    Fills ``objective[0..n_iter]`` and returns (n_iter, converged).
    """
    p = G.shape[0]
    # a relative slack of 1e-12 keeps lambda = lambda_max exactly sparse despite rounding
    half = 0.5 * lam * (1.0 + 1e-12)
    Gw = G @ w
    l1 = 0.0
    for j in range(p):
        l1 += abs(w[j])
    objective[0] = yy - 2.0 * (w @ c) + w @ Gw + lam * l1
    for it in range(1, max_iter + 1):
        max_delta = 0.0
        for j in range(p):
            d = G[j, j]
            if d <= 0.0:
                continue
            old = w[j]
            rho = c[j] - Gw[j] + d * old
            if rho > half:
                new = (rho - half) / d
            elif rho < -half:
                new = (rho + half) / d
            else:
                new = 0.0
            if new != old:
                delta = new - old
                for k in range(p):
                    Gw[k] += G[k, j] * delta
                w[j] = new
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        l1 = 0.0
        for j in range(p):
            l1 += abs(w[j])
        objective[it] = yy - 2.0 * (w @ c) + w @ Gw + lam * l1
        if max_delta < tol:
            return it, True
    return max_iter, False


try:  # the sweep loop is scalar code; compile it when numba is present
    import numba

    _cd_sweeps_fast = numba.njit(cache=True, nogil=True)(_cd_sweeps)
except ImportError:  # pragma: no cover
    _cd_sweeps_fast = _cd_sweeps


def _cd_gram(G, c, yy, lam, w, tol, max_iter):
    objective = np.empty(max_iter + 1)
    it, converged = _cd_sweeps_fast(np.ascontiguousarray(G), np.ascontiguousarray(c), float(yy),
                                    float(lam), w, float(tol), int(max_iter), objective)
    return w, it, converged, objective[:it + 1].tolist()


def lasso_cd(X_std, y, lam, tol=1e-9, max_iter=10000, warm_start=None):
    """Minimize Σ(y − b − Xw)² + lam·Σ|w_j| with the intercept b unpenalized.

    Cyclic coordinate descent with soft-thresholding on centered data. The
    stopping rule ``max |Δw| < tol`` is applied on the scale where y has unit
    standard deviation. The objective after every sweep is in
    ``result.objective`` (never increasing).
    """
    X = as_float_matrix(X_std)
    y = as_float_vector(y)
    if lam < 0:
        raise DataError("lambda must be non-negative")
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    s = float(yc.std()) or 1.0
    ys = yc / s
    G = Xc.T @ Xc
    c = Xc.T @ ys
    w = np.zeros(X.shape[1]) if warm_start is None else np.asarray(warm_start, dtype=float) / s
    w, it, converged, obj = _cd_gram(G, c, float(ys @ ys), lam / s, w.copy(), tol, max_iter)
    if not converged:
        warnings.warn(f"lasso_cd hit max_iter={max_iter} before converging", ConvergenceWarning,
                      stacklevel=2)
    coef = w * s
    return LassoResult(intercept=float(ym - xm @ coef), coef=coef, n_iter=it, converged=converged,
                       objective=[o * s * s for o in obj])


def lambda_max(X_std, y):
    """Smallest lambda with all slopes exactly zero: 2·max_j |x̃_jᵀ(y − ȳ)|."""
    X = as_float_matrix(X_std)
    y = as_float_vector(y)
    return 2.0 * float(np.max(np.abs((X - X.mean(0)).T @ (y - y.mean())))) if X.shape[1] else 0.0


def default_lambda_grid(X_std, y, n=50, ratio=1e-3):
    lm = lambda_max(X_std, y)
    if lm == 0:
        return np.array([0.0])
    return lm * np.logspace(0, np.log10(ratio), n)


def lasso_path(X_std, y, lambdas, tol=1e-9, max_iter=10000):
    """Warm-started fits along ``lambdas`` in the given order."""
    out = []
    w = None
    for lam in lambdas:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            res = lasso_cd(X_std, y, lam, tol=tol, max_iter=max_iter, warm_start=w)
        out.append(res)
        w = res.coef
    return out


@dataclass
class CVTrace:
    lambdas: np.ndarray
    mean_mse: np.ndarray
    std_mse: np.ndarray
    n_nonzero: np.ndarray
    best_lambda: float
    fold_mse: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {"lambdas": self.lambdas.tolist(), "mean_mse": self.mean_mse.tolist(),
                "std_mse": self.std_mse.tolist(), "n_nonzero": self.n_nonzero.tolist(),
                "best_lambda": self.best_lambda}


def kfold_indices(n, n_folds, seed):
    """Disjoint folds of near-equal size from a seeded permutation."""
    if n_folds < 2:
        raise DataError("need at least 2 folds")
    if n_folds > n:
        raise DataError(f"{n_folds} folds for {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


def _fold_mse(X, y, test, lambdas, n, tol, max_iter):
    train = np.setdiff1d(np.arange(n), test)
    # same per-row penalty as the full-data fit
    scaled = np.asarray(lambdas) * (train.size / n)
    path = lasso_path(X[train], y[train], scaled, tol=tol, max_iter=max_iter)
    return [float(np.mean((y[test] - r.intercept - X[test] @ r.coef) ** 2)) for r in path]


def lasso_cv(X_std, y, lambda_grid=None, n_folds=5, seed=0, tol=1e-9, max_iter=10000, n_jobs=1):
    """Pick lambda by k-fold CV mean squared error; ties go to the larger lambda.

    Within a fold, lambda is scaled by n_train / n so that the per-row
    penalty matches the full-data objective.
    """
    X = as_float_matrix(X_std)
    y = as_float_vector(y)
    n = X.shape[0]
    lambdas = default_lambda_grid(X, y) if lambda_grid is None else np.asarray(lambda_grid, dtype=float)
    order = np.argsort(-lambdas, kind="stable")
    lam_desc = lambdas[order]
    folds = kfold_indices(n, n_folds, seed)
    fold_mse = np.array(Parallel(n_jobs=n_jobs)(
        delayed(_fold_mse)(X, y, f, lam_desc, n, tol, max_iter) for f in folds))
    mean = fold_mse.mean(axis=0)
    std = fold_mse.std(axis=0)
    full = lasso_path(X, y, lam_desc, tol=tol, max_iter=max_iter)
    nnz = np.array([r.n_nonzero for r in full])
    best_i = 0
    for i in range(1, len(lam_desc)):
        if mean[i] < mean[best_i] * (1 - 1e-12):
            best_i = i
    return float(lam_desc[best_i]), CVTrace(lambdas=lam_desc, mean_mse=mean, std_mse=std,
                                             n_nonzero=nnz, best_lambda=float(lam_desc[best_i]),
                                             fold_mse=fold_mse)


# ---------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class Term:
    kind: str  # "linear" or "rule"
    coefficient: float
    feature: int = -1
    name: str = ""
    rule: Rule = None

    def describe(self, names=None):
        return self.name if self.kind == "linear" else self.rule.text(names)

    def to_dict(self):
        d = {"kind": self.kind, "coefficient": self.coefficient}
        if self.kind == "linear":
            d.update(feature=self.feature, name=self.name)
        else:
            d["rule"] = self.rule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == "linear":
            return cls("linear", float(d["coefficient"]), int(d["feature"]), d["name"])
        return cls("rule", float(d["coefficient"]), rule=Rule.from_dict(d["rule"]))


@dataclass(frozen=True, eq=False)
class RuleFitModel:
    """Intercept plus linear and rule terms, all in raw units."""

    intercept: float
    terms: tuple
    feature_names: tuple
    lambda_: float = float("nan")
    cv_trace: CVTrace = None

    @property
    def rules(self):
        return [t for t in self.terms if t.kind == "rule"]

    @property
    def linear_terms(self):
        return [t for t in self.terms if t.kind == "linear"]

    def to_json(self):
        doc = {"intercept": self.intercept, "feature_names": list(self.feature_names),
               "lambda": self.lambda_, "terms": [t.to_dict() for t in self.terms],
               "cv_trace": None if self.cv_trace is None else self.cv_trace.to_dict()}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        cv = d.get("cv_trace")
        trace = None if cv is None else CVTrace(
            lambdas=np.asarray(cv["lambdas"]), mean_mse=np.asarray(cv["mean_mse"]),
            std_mse=np.asarray(cv["std_mse"]), n_nonzero=np.asarray(cv["n_nonzero"]),
            best_lambda=cv["best_lambda"])
        return cls(intercept=float(d["intercept"]), terms=tuple(Term.from_dict(t) for t in d["terms"]),
                   feature_names=tuple(d["feature_names"]), lambda_=float(d["lambda"]), cv_trace=trace)

    def to_csv(self):
        """Model card: number, factor or rule text, type, coefficient."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["no", "factor_or_rule", "type", "coefficient"])
        w.writerow([0, "intercept", "intercept", repr(self.intercept)])
        for i, t in enumerate(self.terms, 1):
            w.writerow([i, t.describe(list(self.feature_names)), t.kind, repr(t.coefficient)])
        return buf.getvalue()

    def equation(self):
        parts = [f"{self.intercept:.2f}"]
        for t in self.terms:
            parts.append(f"{t.coefficient:+.2f}·[{t.describe(list(self.feature_names))}]")
        return "ŷ = " + " ".join(parts)


def _align(model, X_raw):
    if hasattr(X_raw, "columns"):
        cols = [str(c) for c in X_raw.columns]
        missing = [n for n in model.feature_names if n not in cols]
        if missing:
            raise DataError(f"missing features: {missing}")
        return np.asarray(X_raw[list(model.feature_names)], dtype=float)
    if isinstance(X_raw, dict):
        missing = [n for n in model.feature_names if n not in X_raw]
        if missing:
            raise DataError(f"missing features: {missing}")
        return np.column_stack([np.asarray(X_raw[n], dtype=float) for n in model.feature_names])
    X = np.asarray(X_raw, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != len(model.feature_names):
        raise DataError(f"model expects {len(model.feature_names)} features "
                        f"{list(model.feature_names)}, got {X.shape[1]} columns")
    return X


def rulefit_predict(model, X_raw):
    """intercept + Σ coefficient · (raw feature value or rule indicator)."""
    X = _align(model, X_raw)
    out = np.full(X.shape[0], model.intercept)
    for t in model.terms:
        if t.kind == "linear":
            out += t.coefficient * X[:, t.feature]
        else:
            out += t.coefficient * t.rule.evaluate(X)
    return out


class RuleFitRegressor(RegressorMixin, BaseEstimator):
    """Rule ensemble with LASSO selection.

    Pipeline: bootstrap forest → rule extraction (capped) → design of
    standardized linear features and 0/1 rule indicators → CV-chosen lambda
    → coordinate-descent LASSO → zero terms dropped and linear coefficients
    back-transformed to raw units.

    Parameters
    ----------
    n_trees, max_depth, min_leaf, feature_subsample, bootstrap :
        Rule-generating forest.
    rule_cap : int
        Maximum number of candidate rules.
    lambda_grid : array-like, optional
        Defaults to 50 log-spaced values from lambda_max down to 1e-3 of it.
    n_folds : int
    standardize_rules : bool
        Scale rule indicators to unit variance before the LASSO (off by default).
    binary_features : array-like of bool, optional
        Linear features left unscaled.
    feature_names : list of str, optional
    seed, n_jobs :
        Results do not depend on ``n_jobs``.
    """

    def __init__(self, n_trees=100, max_depth=4, min_leaf=20, feature_subsample=1 / 3, bootstrap=True,
                 rule_cap=50, lambda_grid=None, n_folds=5, standardize_rules=False,
                 binary_features=None, feature_names=None, tol=1e-9, max_iter=10000, seed=0, n_jobs=1):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.feature_subsample = feature_subsample
        self.bootstrap = bootstrap
        self.rule_cap = rule_cap
        self.lambda_grid = lambda_grid
        self.n_folds = n_folds
        self.standardize_rules = standardize_rules
        self.binary_features = binary_features
        self.feature_names = feature_names
        self.tol = tol
        self.max_iter = max_iter
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y):
        names = feature_names_for(X, self.feature_names)
        X = as_float_matrix(X)
        y = as_float_vector(y)
        if X.shape[0] != y.shape[0]:
            raise DataError("X and y differ in length")
        scaler = Scaler(binary_mask=self.binary_features, feature_names=names).fit(X)
        Z = scaler.transform(X)
        rules = []
        self.candidate_rules_ = []
        if self.rule_cap > 0:
            self.forest_ = fit_forest(
                X, y, self.n_trees,
                {"max_depth": self.max_depth, "min_leaf": self.min_leaf,
                 "feature_subsample": self.feature_subsample},
                seed=self.seed, bootstrap=self.bootstrap, n_jobs=self.n_jobs)
            rules = extract_rules(self.forest_, X, self.rule_cap, names)
        self.candidate_rules_ = rules
        R = rule_matrix(rules, X)
        if R.shape[1]:
            keep = independent_columns(Z, R)
            rules = [rules[k] for k in keep]
            R = R[:, keep]
        r_scale = R.std(axis=0) if (self.standardize_rules and R.shape[1]) else np.ones(R.shape[1])
        r_mean = R.mean(axis=0) if (self.standardize_rules and R.shape[1]) else np.zeros(R.shape[1])
        D = np.column_stack([Z, (R - r_mean) / r_scale]) if R.shape[1] else Z
        best, trace = lasso_cv(D, y, self.lambda_grid, self.n_folds, self.seed, self.tol,
                               self.max_iter, self.n_jobs)
        fit = lasso_cd(D, y, best, tol=self.tol, max_iter=self.max_iter)
        self.lasso_ = fit
        self.scaler_ = scaler
        self.design_rules_ = rules
        self.design_ = D
        p = X.shape[1]
        w_lin, w_rule = fit.coef[:p], fit.coef[p:]
        raw_lin = w_lin / scaler.scale_
        raw_rule = w_rule / r_scale
        intercept = fit.intercept - float(np.sum(w_lin * scaler.mean_ / scaler.scale_)) \
            - float(np.sum(w_rule * r_mean / r_scale))
        terms = [Term("linear", float(raw_lin[j]), j, names[j]) for j in range(p) if w_lin[j] != 0]
        terms += [Term("rule", float(raw_rule[k]), rule=rules[k]) for k in range(len(rules)) if w_rule[k] != 0]
        self.model_ = RuleFitModel(intercept=float(intercept), terms=tuple(terms),
                                   feature_names=tuple(names), lambda_=best, cv_trace=trace)
        self.n_features_in_ = p
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return rulefit_predict(self.model_, X)


def rulefit_fit(table, config=None):
    """Fit RuleFit on a FeatureTable (binary columns are left unscaled)."""
    params = dict(config or {})
    est = RuleFitRegressor(binary_features=table.binary_mask, feature_names=table.names, **params)
    return est.fit(table.matrix, table.target).model_


def prefilter_features(table, min_abs_corr=0.15, keep_binary=True):
    """Continuous columns with |corr(feature, target)| ≥ threshold, plus binary columns."""
    keep = []
    y = table.target
    for j, c in enumerate(table.columns):
        x = table.matrix[:, j]
        if c.kind == "binary":
            if keep_binary and 0 < x.mean() < 1:
                keep.append(c.name)
            continue
        if x.std() == 0:
            continue
        if abs(np.corrcoef(x, y)[0, 1]) >= min_abs_corr:
            keep.append(c.name)
    return keep


def subset_search(train, valid, config=None, max_size=11, budget=64, expected_signs=None):
    """Fit RuleFit on feature subsets, best validation R²adj first and MAE second.

    Subsets are enumerated largest first in lexicographic order until
    ``budget`` fits were made. Subsets whose linear terms contradict an
    expected sign are skipped. Returns (best names, best model, log).
    """
    from .evaluation import mae, r2_adj

    names = train.names
    signs = expected_signs or {c.name: c.expected_sign for c in train.columns}
    log = []
    best = None
    fits = 0
    for size in range(min(max_size, len(names)), 0, -1):
        for subset in itertools.combinations(names, size):
            if fits >= budget:
                break
            fits += 1
            model = rulefit_fit(train.select(list(subset)), config)
            pred = rulefit_predict(model, valid.select(list(subset)).matrix)
            n_params = len(model.terms)
            ok = all(signs.get(t.name, "unconstrained") == "unconstrained"
                     or (t.coefficient > 0) == (signs[t.name] == "positive")
                     for t in model.linear_terms)
            score = (r2_adj(valid.target, pred, n_params) if valid.n_rows > n_params + 1 else -np.inf,
                     -mae(valid.target, pred))
            log.append({"features": list(subset), "signs_ok": ok, "r2_adj": score[0], "mae": -score[1]})
            if ok and (best is None or score > best[0]):
                best = (score, list(subset), model)
    if best is None:
        return None, None, log
    return best[1], best[2], log
