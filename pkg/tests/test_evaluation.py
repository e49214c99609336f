import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from appraisal.dataset import ColumnMeta, FeatureTable
from appraisal.evaluation import (MetricReport, format_reports, kfold_cv, mae, mape, r2, r2_adj,
                                  reports_to_csv, reports_to_json)
from appraisal.exceptions import DataError
from appraisal.linmodel import ols_fit
from appraisal.report import emit_report, histogram_csv, qq_csv, qq_data


def test_metrics_match_naive_loops():
    y = [100.0, 200.0, 400.0]
    p = [110.0, 180.0, 400.0]
    assert mae(y, p) == pytest.approx((10 + 20 + 0) / 3)
    assert mape(y, p) == pytest.approx((0.1 + 0.1 + 0.0) / 3 * 100)
    ybar = sum(y) / 3
    want = 1 - sum((a - b) ** 2 for a, b in zip(y, p)) / sum((a - ybar) ** 2 for a in y)
    assert r2(y, p) == pytest.approx(want)


def test_mape_reports_first_zero_index():
    with pytest.raises(DataError, match="index 2"):
        mape([1.0, 2.0, 0.0, 0.0], [1.0, 2.0, 3.0, 4.0])
    with pytest.raises(DataError):
        mae([1.0, 2.0], [1.0])
    with pytest.raises(DataError):
        r2([3.0, 3.0], [1.0, 2.0])


@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_r2_adj_formula(seed, p):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=30)
    yp = y + rng.normal(size=30)
    assert r2_adj(y, yp, p) == pytest.approx(1 - (1 - r2(y, yp)) * 29 / (29 - p))


def test_r2_adj_needs_enough_rows():
    with pytest.raises(DataError):
        r2_adj([1.0, 2.0, 3.0], [1.0, 2.0, 3.5], 2)
    rep = MetricReport.compute([1.0, 2.0, 3.0], [1.0, 2.0, 3.5], 2)
    assert np.isnan(rep.r2_adj)


def test_report_serialization():
    reps = [MetricReport.compute([1.0, 2.0, 4.0, 5.0], [1.1, 2.0, 3.9, 5.2], 1, "ols", "flat", "test")]
    lines = reports_to_csv(reps).splitlines()
    assert lines[0] == "model,dataset,split,n,mae,mape,r2_adj"
    assert lines[1].startswith("ols,flat,test,4,")
    back = json.loads(reports_to_json(reps))
    assert back[0]["mae"] == reps[0].mae
    assert "MAPE" in format_reports(reps)


def _table(n=60, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = 100 + X @ [5.0, -3.0] + rng.normal(size=n)
    return FeatureTable(X, y, (ColumnMeta("a"), ColumnMeta("b")), ids=[str(i) for i in range(n)],
                        target_kind="psmp")


def test_kfold_cv_matches_manual_folds():
    t = _table()
    res = kfold_cv("ols", t, k=4, seed=2)
    assert len(res.folds) == 4
    idx = np.concatenate(res.fold_indices)
    assert sorted(idx.tolist()) == list(range(60))
    for f, rep in zip(res.fold_indices, res.folds):
        tr = np.setdiff1d(np.arange(60), f)
        fit = ols_fit(t.matrix[tr], t.target[tr])
        pred = fit.intercept + t.matrix[f] @ fit.coef
        assert rep.mape == pytest.approx(mape(t.target[f], pred), rel=1e-12)
        np.testing.assert_allclose(res.predictions[f], pred, rtol=1e-12)
    assert res.mean.mape == pytest.approx(np.mean([r.mape for r in res.folds]))


def test_kfold_cv_errors_and_custom_recipe():
    t = _table(n=20)
    with pytest.raises(DataError):
        kfold_cv("svm", t)
    with pytest.raises(DataError):
        kfold_cv("ols", t, k=1)

    def mean_model(train, test, params):
        return np.full(test.n_rows, train.target.mean()), 0

    res = kfold_cv(mean_model, t, k=5)
    assert res.mean.model == "mean_model"


def test_qq_quantiles_use_half_offset():
    q, e = qq_data([3.0, -1.0, 0.5, 2.0])
    np.testing.assert_array_equal(e, [-1.0, 0.5, 2.0, 3.0])
    np.testing.assert_allclose(q, stats.norm.ppf([0.125, 0.375, 0.625, 0.875]))
    assert qq_csv([]).strip() == "theoretical_quantile,residual"
    assert histogram_csv([]).strip() == "bin_left,bin_right,count"


def test_emit_report_writes_headers_when_empty(tmp_path):
    names = emit_report({}, tmp_path)
    assert names == sorted(["pred_vs_actual.csv", "residual_qq.csv", "residual_hist.csv", "metrics.csv",
                            "metrics.txt"])
    assert (tmp_path / "pred_vs_actual.csv").read_text().strip() == "id,actual,predicted,split"


def test_emit_report_with_fit(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 2))
    fit = ols_fit(X, X @ [1.0, 2.0] + rng.normal(size=40), ["a", "b"])
    names = emit_report({"ols": fit, "predictions": {"ols": (["1", "2"], [1.0, 2.0], [1.5, 2.5], "test")}},
                        tmp_path)
    assert "ols_summary.txt" in names and "homoscedasticity.csv" in names
    hist = (tmp_path / "residual_hist.csv").read_text().splitlines()
    assert sum(int(r.split(",")[2]) for r in hist[1:]) == 40
    assert (tmp_path / "pred_vs_actual_ols.csv").read_text().splitlines()[1] == "1,1.0,1.5,test"


def test_hand_arithmetic_examples():
    assert mae([1.0, 2.0], [2.0, 4.0]) == 1.5
    assert mape([100.0, 200.0], [110.0, 180.0]) == pytest.approx(10.0)
    assert mae([1.0, 5.0], [2.0, 3.0]) == mae([2.0, 3.0], [1.0, 5.0])
    assert mape([100.0], [50.0]) != mape([50.0], [100.0])
    y = np.array([1.0, 2.0, 4.0, 7.0])
    assert r2_adj(y, np.full(4, y.mean()), 1) == pytest.approx(-0.5)


def test_leave_one_out_matches_hand_loop():
    t = _table(n=12, seed=4)
    res = kfold_cv("ols", t, k=12, seed=0)
    want = []
    for i in range(12):
        tr = np.r_[0:i, i + 1:12]
        fit = ols_fit(t.matrix[tr], t.target[tr])
        want.append(fit.intercept + t.matrix[i] @ fit.coef)
    np.testing.assert_allclose(res.predictions, want, rtol=1e-12)
