"""End-to-end pipeline: collect → outliers → features → selection → model →
evaluate → report, with a content-hash manifest of every output.
"""

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig, parse_config
from .dataset import parse_geojson, parse_records, records_to_csv, split
from .evaluation import MetricReport, kfold_cv, reports_to_json
from .exceptions import AppraisalError, StageError
from .features import RoadGraph, build_feature_table, parse_poi
from .outliers import CleanConfig, clean_pipeline
from .selection import Thresholds, correlation_matrix, drop_multicollinear, rfe, univariate_f_scores

STAGES = ("collect", "outliers", "features", "selection", "model", "evaluate", "report")


@dataclass
class Bundle:
    """Everything a run produced, kept in memory for reporting."""

    config: PipelineConfig
    out_dir: Path
    files: dict = field(default_factory=dict)  # relative path -> sha256
    records: list = None
    rejects: list = None
    kept: list = None
    outliers: object = None
    table: object = None
    selected: dict = field(default_factory=dict)
    selection: object = None
    train: object = None
    test: object = None
    ols: object = None
    rk: object = None
    rulefit: object = None
    forest: object = None
    variogram: tuple = None
    correlogram: object = None
    predictions: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    completed: list = field(default_factory=list)

    def write(self, rel, text):
        path = self.out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        data = text.encode("utf-8")
        path.write_bytes(data)
        self.files[rel] = hashlib.sha256(data).hexdigest()

    def get(self, key, default=None):
        return getattr(self, key, default)


def _json(obj):
    return json.dumps(obj, indent=1, sort_keys=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------------------
# stages

def _collect(b):
    cfg = b.config
    path = cfg.path(cfg.inputs.records)
    schema = cfg.path(cfg.inputs.schema_file)
    schema_doc = schema.read_text() if schema else None
    data = path.read_bytes()
    if path.suffix.lower() in (".json", ".geojson"):
        records, rejects = parse_geojson(data, schema_doc)
    else:
        records, rejects = parse_records(data, schema_doc)
    other = [r for r in records if r.segment != cfg.segment]
    records = [r for r in records if r.segment == cfg.segment]
    if not records:
        raise AppraisalError(f"no {cfg.segment} records in {path.name}")
    b.records, b.rejects = records, rejects
    b.write("collect/records.csv", records_to_csv(records))
    b.write("collect/rejects.csv", "line,reason\n" + "".join(
        f"{r.line},{json.dumps(r.reason)}\n" for r in rejects))
    b.write("collect/summary.json", _json({"records": len(records), "rejects": len(rejects),
                                           "other_segment": len(other)}))


def _clean_config(cfg):
    o = cfg.outliers
    if not o.enabled:
        return CleanConfig.disabled(seed=cfg.seed, n_jobs=cfg.workers)
    params = o.model_dump()
    params.pop("enabled")
    params["screen_bands"] = {k: list(v) for k, v in params["screen_bands"].items()}
    params["building_numeric"] = tuple(params["building_numeric"])
    params["building_categorical"] = tuple(params["building_categorical"])
    return CleanConfig(seed=cfg.seed, n_jobs=cfg.workers, **params)


def _outliers(b):
    kept, report = clean_pipeline(b.records, _clean_config(b.config))
    if len(kept) < 10:
        raise AppraisalError(f"only {len(kept)} records survive outlier cleaning")
    b.kept, b.outliers = kept, report
    b.write("outliers/outlier_report.csv", report.to_csv())
    stages = {}
    for e in report.entries:
        stages[e.stage] = stages.get(e.stage, 0) + 1
    b.write("outliers/summary.json", _json({"input": len(b.records), "kept": len(kept),
                                            "removed": len(report), "by_stage": stages}))


def _definitions(cfg):
    if cfg.features.definitions is not None:
        return [dict(d) for d in cfg.features.definitions]
    if cfg.inputs.features is None:
        raise AppraisalError("no feature definitions: set features.definitions or inputs.features")
    return json.loads(cfg.path(cfg.inputs.features).read_text())


def _features(b):
    cfg = b.config
    layers = parse_poi(cfg.path(cfg.inputs.poi).read_bytes()) if cfg.inputs.poi else {}
    graph = None
    if cfg.inputs.road_nodes and cfg.inputs.road_edges:
        graph = RoadGraph.from_csv(cfg.path(cfg.inputs.road_nodes).read_text(),
                                   cfg.path(cfg.inputs.road_edges).read_text())
    target = "log_psmp" if cfg.segment == "land_parcel" else "psmp"
    origin = None if cfg.features.origin is None else np.asarray(cfg.features.origin, dtype=float)
    table = build_feature_table(b.kept, _definitions(cfg), origin=origin, layers=layers, graph=graph,
                                target=target, seed=cfg.seed, n_jobs=cfg.workers,
                                road_max_nodes=cfg.features.road_max_nodes,
                                road_subsample=cfg.features.road_subsample)
    b.table = table
    b.write("features/table.csv", table.to_csv())
    b.write("features/metadata.json", _json(table.metadata()))


def _selection(b):
    from .rulefit import prefilter_features

    cfg, table = b.config, b.table
    s = cfg.selection
    names = table.names
    if not s.enabled:
        b.selected = {"ols": names, "rulefit": names}
        b.write("selection/summary.json", _json({"enabled": False, "selected": b.selected}))
        return
    continuous = [c.name for c in table.columns if c.kind == "continuous" and np.ptp(table.column(c.name)) > 0]
    usable = [n for n in names if n in continuous or 0 < table.column(n).mean() < 1]
    sub = table.select(usable)
    C, cnames = correlation_matrix(sub)
    b.write("selection/correlation.csv", ",".join(["feature"] + cnames) + "\n" + "".join(
        ",".join([cnames[i]] + [repr(float(v)) for v in C[i]]) + "\n" for i in range(len(cnames))))
    screened = drop_multicollinear(C[:-1, :-1], C[:-1, -1], s.corr_threshold, names=usable)
    scores = univariate_f_scores(sub, s.f_cap)
    b.write("selection/f_scores.csv", "feature,f_stat,p_value\n" + "".join(
        f"{n},{scores[n][0]!r},{scores[n][1]!r}\n" for n in usable))
    th = Thresholds(coef_p=s.coef_p, f_p=s.f_p, dw_low=s.dw_low, dw_high=s.dw_high, jb_p=s.jb_p)
    # observations are spatially sorted for the Durbin-Watson check
    order = np.lexsort((table.coords[:, 1], table.coords[:, 0])) if table.coords is not None \
        else np.arange(table.n_rows)
    trace = rfe(table.take(order).select(screened), thresholds=th)
    b.selection = trace
    b.write("selection/rfe_trace.csv", trace.to_csv())
    ols_features = trace.chosen if trace.chosen is not None else screened
    rf_features = prefilter_features(sub, s.min_target_corr)
    b.selected = {"ols": list(ols_features), "rulefit": rf_features or usable}
    b.write("selection/summary.json", _json({
        "enabled": True, "screened": screened, "rfe_chosen": trace.chosen,
        "no_valid_model": trace.no_valid_model, "selected": b.selected}))


def _model(b):
    from .geostat import RegressionKriging, correlogram
    from .linmodel import ols_fit, predict, vif
    from .rulefit import rulefit_fit, rulefit_predict
    from .trees import ForestRegressor

    cfg = b.config
    train, test = split(b.table, cfg.evaluation.train_fraction, cfg.seed)
    b.train, b.test = train, test
    to_psmp = (lambda v: np.exp(v)) if b.table.target_kind == "log_psmp" else (lambda v: v)
    models = cfg.fitted_models

    if "ols" in models or "rk" in models:
        names = b.selected["ols"]
        tr, te = train.select(names), test.select(names)
        fit = ols_fit(tr.matrix, tr.target, feature_names=names)
        b.ols = fit
        b.write("model/ols_summary.txt", fit.summary())
        b.write("model/ols.json", fit.to_json() + "\n")
        v = vif(tr.matrix, names) if len(names) > 1 else {names[0]: 1.0}
        b.write("model/vif.csv", "feature,vif\n" + "".join(f"{k},{v[k]!r}\n" for k in names))
        if "ols" in models:
            b.predictions["ols"] = (te.ids, te.psmp(), to_psmp(predict(fit, te.matrix)), "test")

    if "rk" in models:
        if b.table.target_kind != "log_psmp" or b.table.coords is None:
            raise AppraisalError("regression-kriging needs a spatial ln(PSMP) table")
        names = b.selected["ols"]
        tr, te = train.select(names), test.select(names)
        rk = RegressionKriging(feature_names=names, **cfg.models.rk.model_dump())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rk.fit(tr.matrix, tr.target, coords=tr.coords)
        b.rk = rk
        ok = rk.kriging_
        b.variogram = (ok.empirical_, ok.variogram_)
        if ok.empirical_ is not None:
            b.write("model/variogram.csv", ok.empirical_.to_csv(ok.variogram_))
        b.write("model/variogram.json", _json(ok.variogram_.to_dict()))
        b.correlogram = correlogram(tr.coords, rk.ols_.residuals, n_bins=cfg.models.rk.n_lags)
        b.write("model/correlogram.csv", b.correlogram.to_csv())
        b.predictions["rk"] = (te.ids, te.psmp(), rk.predict(te.matrix, coords=te.coords), "test")

    if "rulefit" in models:
        names = b.selected["rulefit"]
        tr, te = train.select(names), test.select(names)
        params = _rulefit_params(cfg)
        model = rulefit_fit(tr, params)
        b.rulefit = model
        b.write("model/rulefit_model_card.csv", model.to_csv())
        b.write("model/rulefit_model.json", model.to_json() + "\n")
        b.predictions["rulefit"] = (te.ids, te.psmp(), to_psmp(rulefit_predict(model, te.matrix)), "test")

    if "forest" in models:
        names = b.selected["rulefit"]
        tr, te = train.select(names), test.select(names)
        est = ForestRegressor(seed=cfg.seed, n_jobs=cfg.workers, **cfg.models.forest.model_dump())
        est.fit(tr.matrix, tr.target)
        b.forest = est
        params = {k: v for k, v in est.get_params().items() if k != "n_jobs"}
        b.write("model/forest.json", _json({"params": params, "features": names,
                                            "node_counts": [t.node_count for t in est.trees_]}))
        b.predictions["forest"] = (te.ids, te.psmp(), to_psmp(est.predict(te.matrix)), "test")

    for m, (ids, actual, pred, _) in sorted(b.predictions.items()):
        b.write(f"model/predictions_{m}.csv", "id,actual,predicted,split\n" + "".join(
            f"{i},{a!r},{p!r},test\n" for i, a, p in zip(ids, actual.tolist(), pred.tolist())))


def _rulefit_params(cfg):
    p = cfg.models.rulefit.model_dump()
    p.pop("subset_search_budget")
    p.pop("subset_max_size")
    p.update(seed=cfg.seed, n_jobs=cfg.workers)
    return p


def _n_params(b, model):
    if model == "rulefit":
        return len(b.rulefit.terms)
    return len(b.selected["ols"] if model in ("ols", "rk") else b.selected["rulefit"])


def _evaluate(b):
    cfg = b.config
    reports = []
    for m, (ids, actual, pred, sp) in sorted(b.predictions.items()):
        reports.append(MetricReport.compute(actual, pred, _n_params(b, m), m, cfg.segment, sp))
    for m in cfg.cv_models:
        names = b.selected["ols"] if m in ("ols", "rk") else b.selected["rulefit"]
        params = {}
        if m == "rk":
            params = cfg.models.rk.model_dump()
        elif m == "rulefit":
            params = _rulefit_params(cfg)
        elif m == "forest":
            params = dict(cfg.models.forest.model_dump(), seed=cfg.seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = kfold_cv(m, b.table.select(names), cfg.evaluation.cv_folds, cfg.seed, params,
                           n_jobs=cfg.workers, dataset=cfg.segment)
        reports.extend(res.folds)
        reports.append(res.mean)
    b.metrics = reports
    from .evaluation import reports_to_csv
    b.write("evaluate/metrics.csv", reports_to_csv(reports))
    b.write("evaluate/metrics.json", reports_to_json(reports) + "\n")


def _report(b):
    from .report import emit_report

    rep_dir = b.out_dir / "report"
    names = emit_report(b, rep_dir)
    for n in names:
        data = (rep_dir / n).read_bytes()
        b.files[f"report/{n}"] = hashlib.sha256(data).hexdigest()


_RUNNERS = {"collect": _collect, "outliers": _outliers, "features": _features, "selection": _selection,
            "model": _model, "evaluate": _evaluate, "report": _report}


def write_manifest(b, status="ok", failed_stage=None, error=None):
    doc = {"segment": b.config.segment, "seed": b.config.seed, "status": status,
           "stages_completed": b.completed,
           "config_sha256": hashlib.sha256(b.config.canonical(include_runtime=False).encode()).hexdigest(),
           "files": [{"path": k, "sha256": b.files[k]} for k in sorted(b.files)]}
    if failed_stage:
        doc["failed_stage"] = failed_stage
        doc["error"] = error
    (b.out_dir / "manifest.json").write_text(_json(doc))
    return doc


def run_pipeline(config, out_dir=None, stages=STAGES):
    """Run the stages in order; returns the :class:`Bundle`.

    Every output file is listed with its SHA-256 in ``manifest.json``.
    The manifest excludes the worker count, so runs that differ only in
    parallelism produce identical manifests. A failing stage raises
    :class:`StageError` after writing a partial manifest.
    """
    cfg = config if isinstance(config, PipelineConfig) else parse_config(config)
    out = Path(out_dir) if out_dir is not None else cfg.path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    b = Bundle(config=cfg, out_dir=out)
    b.write("config.json", cfg.canonical(include_runtime=False) + "\n")
    for stage in STAGES:
        if stage not in stages:
            continue
        try:
            _RUNNERS[stage](b)
        except (AppraisalError, ValueError, OSError, np.linalg.LinAlgError) as exc:
            write_manifest(b, "failed", stage, str(exc))
            raise StageError(stage, str(exc)) from exc
        b.completed.append(stage)
    b.manifest = write_manifest(b)
    return b


def bundle_summary(b):
    return {"stages": b.completed, "files": len(b.files),
            "metrics": [asdict(m) for m in b.metrics]}
