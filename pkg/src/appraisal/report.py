"""Text tables and plot-ready CSV files for a finished pipeline run."""

import csv
import io
from pathlib import Path

import numpy as np
from scipy import stats

from .evaluation import format_reports, reports_to_csv

PVA_HEADER = ["id", "actual", "predicted", "split"]


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def predicted_vs_actual_csv(ids, actual, predicted, split):
    n = len(actual)
    splits = [split] * n if isinstance(split, str) else list(split)
    return _csv(PVA_HEADER, zip(ids, np.asarray(actual, float), np.asarray(predicted, float), splits))


def qq_data(residuals):
    """Sorted residuals paired with standard normal quantiles at (i − 0.5)/n."""
    e = np.sort(np.asarray(residuals, dtype=float))
    n = e.size
    if n == 0:
        return np.zeros(0), e
    probs = (np.arange(1, n + 1) - 0.5) / n
    return stats.norm.ppf(probs), e


def qq_csv(residuals):
    q, e = qq_data(residuals)
    return _csv(["theoretical_quantile", "residual"], zip(q, e))


def histogram_csv(residuals, bins=20):
    e = np.asarray(residuals, dtype=float)
    if e.size == 0:
        return _csv(["bin_left", "bin_right", "count"], [])
    counts, edges = np.histogram(e, bins=bins)
    return _csv(["bin_left", "bin_right", "count"], zip(edges[:-1], edges[1:], counts))


def homoscedasticity_csv(fitted, residuals):
    return _csv(["fitted", "residual"], zip(np.asarray(fitted, float), np.asarray(residuals, float)))


def emit_report(bundle, out_dir):
    """Write every report file the bundle supports; returns written names.

    ``bundle`` is a mapping (or object with the same attributes) that may
    carry ``ols`` (OlsFit), ``variogram`` ((EmpiricalVariogram,
    VariogramModel)), ``correlogram``, ``predictions`` (model ->
    (ids, actual, predicted, split)), ``metrics`` (list of MetricReport),
    ``selection`` (SelectionTrace), ``rulefit`` (RuleFitModel) and
    ``outliers`` (OutlierReport). The predicted-vs-actual, QQ, histogram and
    metrics files are always written, with headers only when empty.
    """
    get = bundle.get if isinstance(bundle, dict) else (lambda k, d=None: getattr(bundle, k, d))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}

    predictions = get("predictions") or {}
    for model, (ids, actual, pred, split) in sorted(predictions.items()):
        files[f"pred_vs_actual_{model}.csv"] = predicted_vs_actual_csv(ids, actual, pred, split)
    if not predictions:
        files["pred_vs_actual.csv"] = _csv(PVA_HEADER, [])

    ols = get("ols")
    resid = ols.residuals if ols is not None else np.zeros(0)
    files["residual_qq.csv"] = qq_csv(resid)
    files["residual_hist.csv"] = histogram_csv(resid)
    if ols is not None:
        files["ols_summary.txt"] = ols.summary()
        files["homoscedasticity.csv"] = homoscedasticity_csv(ols.fitted, ols.residuals)

    metrics = list(get("metrics") or [])
    files["metrics.csv"] = reports_to_csv(metrics)
    files["metrics.txt"] = format_reports(metrics)

    vg = get("variogram")
    if vg is not None and vg[0] is not None:
        files["variogram.csv"] = vg[0].to_csv(vg[1])
    cg = get("correlogram")
    if cg is not None:
        files["correlogram.csv"] = cg.to_csv()
    sel = get("selection")
    if sel is not None:
        files["selection_trace.csv"] = sel.to_csv()
    rf = get("rulefit")
    if rf is not None:
        files["rulefit_model_card.csv"] = rf.to_csv()
        files["rulefit_equation.txt"] = rf.equation() + "\n"
    outl = get("outliers")
    if outl is not None:
        files["outlier_report.csv"] = outl.to_csv()

    for name, text in files.items():
        (out / name).write_text(text)
    return sorted(files)
