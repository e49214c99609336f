"""Feature screening and diagnostics-gated recursive feature elimination."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .exceptions import AppraisalError, DataError
from .linmodel import ols_fit


def correlation_matrix(table):
    """Pearson correlations among features plus the target (last row/column)."""
    M = np.column_stack([table.matrix, table.target])
    names = table.names + ["target"]
    if M.shape[0] < 2:
        raise DataError("correlation needs at least 2 rows")
    sd = M.std(axis=0)
    for j in np.flatnonzero(sd == 0):
        raise DataError(f"column {names[j]!r} has zero variance")
    C = np.corrcoef(M, rowvar=False)
    C = np.clip((C + C.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(C, 1.0)
    return C, names


def drop_multicollinear(corr, target_corr, threshold=0.7, names=None):
    """Greedy removal of one member of each highly correlated feature pair.

    Pairs with |r| ≥ threshold are visited by descending |r|; the member less
    correlated with the target goes (ties drop the later column). The scan
    repeats until no surviving pair reaches the threshold. Returns the kept
    column indices (or names when given).
    """
    C = np.abs(np.asarray(corr, dtype=float))
    tc = np.abs(np.asarray(target_corr, dtype=float))
    p = C.shape[0]
    alive = list(range(p))
    while True:
        pairs = [(C[i, j], i, j) for a, i in enumerate(alive) for j in alive[a + 1:] if C[i, j] >= threshold]
        if not pairs:
            break
        pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
        dropped = set()
        for _, i, j in pairs:
            if i in dropped or j in dropped:
                continue
            drop = j if tc[i] >= tc[j] else i
            dropped.add(drop)
        alive = [k for k in alive if k not in dropped]
    return [names[k] for k in alive] if names is not None else alive


def univariate_f_scores(table, f_cap=1e300):
    """Single-regressor F statistic r²(n−2)/(1−r²) and its F(1, n−2) p-value per feature."""
    n = table.n_rows
    if n <= 2:
        raise DataError("univariate F scores need n > 2")
    C, names = correlation_matrix(table)
    r = C[:-1, -1]
    out = {}
    for name, rj in zip(names[:-1], r):
        r2 = rj * rj
        if r2 >= 1.0:
            out[name] = (f_cap, 0.0)
            continue
        F = r2 * (n - 2) / (1.0 - r2)
        out[name] = (float(F), float(stats.f.sf(F, 1, n - 2)))
    return out


@dataclass(frozen=True)
class Thresholds:
    coef_p: float = 0.05
    f_p: float = 0.01
    dw_low: float = 1.5
    dw_high: float = 2.5
    jb_p: float = 0.05


@dataclass
class SelectionStep:
    features: list
    r2_adj: float = float("nan")
    durbin_watson: float = float("nan")
    jb_pvalue: float = float("nan")
    f_pvalue: float = float("nan")
    max_coef_p: float = float("nan")
    coef_ok: bool = False
    f_ok: bool = False
    dw_ok: bool = False
    jb_ok: bool = False
    signs_ok: bool = False
    error: str = ""

    @property
    def passed(self):
        return self.coef_ok and self.f_ok and self.dw_ok and self.jb_ok and self.signs_ok and not self.error


@dataclass
class SelectionTrace:
    steps: list = field(default_factory=list)
    chosen: list = None

    @property
    def no_valid_model(self):
        return self.chosen is None

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n_factors", "r2_adj", "durbin_watson", "p_jarque_bera", "p_f_statistic",
                    "coef_ok", "f_ok", "dw_ok", "jb_ok", "signs_ok", "passed", "selected",
                    "features", "error"])
        for s in self.steps:
            w.writerow([len(s.features), repr(s.r2_adj), repr(s.durbin_watson), repr(s.jb_pvalue),
                        repr(s.f_pvalue), int(s.coef_ok), int(s.f_ok), int(s.dw_ok), int(s.jb_ok),
                        int(s.signs_ok), int(s.passed),
                        int(self.chosen is not None and list(s.features) == list(self.chosen)),
                        ";".join(s.features), s.error])
        return buf.getvalue()


def _sign_ok(coef, expected):
    if expected == "positive":
        return coef > 0
    if expected == "negative":
        return coef < 0
    return True


def rfe(table, expected_signs=None, thresholds=None):
    """Recursive elimination of the least significant feature.

    Every step fits OLS, records the diagnostics and removes the feature with
    the largest coefficient p-value. The chosen subset is the largest one
    whose fit passes every gate (coefficient p, F p-value, Durbin-Watson
    band, Jarque-Bera p-value, expected signs); ``trace.chosen`` is None when
    no step passes.
    """
    th = thresholds or Thresholds()
    if expected_signs is None:
        expected_signs = {c.name: c.expected_sign for c in table.columns}
    current = list(table.names)
    trace = SelectionTrace()
    while current:
        step = SelectionStep(features=list(current))
        X = table.select(current).matrix
        try:
            fit = ols_fit(X, table.target, feature_names=current)
        except (DataError, AppraisalError, np.linalg.LinAlgError) as exc:
            step.error = str(exc)
            trace.steps.append(step)
            # drop the offending column when named, else the last one
            bad = getattr(exc, "dependent_columns", None) or [current[-1]]
            bad = [b for b in bad if b in current] or [current[-1]]
            current.remove(bad[-1])
            continue
        p = fit.p_values[1:]
        step.r2_adj = fit.r2_adj
        step.durbin_watson = fit.durbin_watson
        step.jb_pvalue = fit.jb_pvalue
        step.f_pvalue = fit.f_pvalue
        step.max_coef_p = float(np.max(p))
        step.coef_ok = bool(np.all(p < th.coef_p))
        step.f_ok = bool(fit.f_pvalue < th.f_p)
        step.dw_ok = bool(th.dw_low <= fit.durbin_watson <= th.dw_high)
        step.jb_ok = bool(fit.jb_pvalue > th.jb_p)
        step.signs_ok = all(_sign_ok(c, expected_signs.get(n, "unconstrained"))
                            for c, n in zip(fit.coef, current))
        trace.steps.append(step)
        worst = int(np.argmax(p))
        current.pop(worst)
    passing = [s for s in trace.steps if s.passed]
    if passing:
        trace.chosen = list(max(passing, key=lambda s: len(s.features)).features)
    return trace
