"""Command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 stage failure.
"""

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .exceptions import AppraisalError, SchemaError, StageError

EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--workers", type=int, help="parallel workers; results do not depend on it")
    p.add_argument("--out", help="output directory")


def build_parser():
    parser = _Parser(prog="appraisal", description="Mass appraisal pipeline for land parcels and flats.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run every stage from a config")
    _common(p)

    p = sub.add_parser("synth", help="generate a synthetic sample with planted truth")
    _common(p)
    p.add_argument("--segment", choices=["land_parcel", "flat"], default="land_parcel")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--outlier-fraction", type=float, default=None)
    p.add_argument("--road-grid", type=int, default=None, help="side of a synthetic road grid (0 = none)")
    p.add_argument("--spec", help="SynthSpec JSON file")

    p = sub.add_parser("ingest", help="parse records and list rejected lines")
    _common(p)
    p.add_argument("records")
    p.add_argument("--schema", help="schema config JSON")

    p = sub.add_parser("clean", help="outlier cleaning on ingested records")
    _common(p)
    p.add_argument("records")

    p = sub.add_parser("features", help="build the feature table")
    _common(p)
    p.add_argument("records")

    p = sub.add_parser("select", help="correlation screen and RFE on a feature table")
    _common(p)
    p.add_argument("table")
    p.add_argument("--meta", help="table metadata JSON (default: metadata.json next to the table)")

    for name in ("fit-ols", "fit-rk", "fit-rulefit", "fit-forest"):
        p = sub.add_parser(name, help=f"fit the {name[4:]} model on a feature table")
        _common(p)
        p.add_argument("table")
        p.add_argument("--meta")
        p.add_argument("--features", help="comma-separated feature subset")

    p = sub.add_parser("predict", help="apply a saved model to a feature table")
    _common(p)
    p.add_argument("model")
    p.add_argument("table")
    p.add_argument("--meta")

    p = sub.add_parser("evaluate", help="k-fold cross-validation of a model recipe")
    _common(p)
    p.add_argument("table")
    p.add_argument("--meta")
    p.add_argument("--model", choices=["ols", "rk", "rulefit", "forest"], default="ols")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--features")

    p = sub.add_parser("report", help="plot data and metric tables from prediction files")
    _common(p)
    p.add_argument("predictions", nargs="+", help="CSV files with id, actual, predicted, split")

    p = sub.add_parser("schema", help="print the config JSON schema")
    return parser


# ---------------------------------------------------------------------------

def _config(args, segment=None):
    from .config import parse_config
    over = {"seed": args.seed, "workers": args.workers}
    if args.config:
        return parse_config(args.config, **over)
    if segment is None:
        raise SchemaError("--config is required for this command")
    return parse_config({"segment": segment}, base_dir=".", **over)


def _out(args, cfg=None):
    out = Path(args.out or (cfg.output_dir if cfg else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_records(path, cfg):
    from .dataset import parse_geojson, parse_records
    schema = cfg.path(cfg.inputs.schema_file) if cfg and cfg.inputs.schema_file else None
    doc = schema.read_text() if schema else None
    data = Path(path).read_bytes()
    if str(path).lower().endswith((".json", ".geojson")):
        return parse_geojson(data, doc)
    return parse_records(data, doc)


def _load_table(args):
    from .dataset import FeatureTable
    path = Path(args.table)
    meta = Path(args.meta) if args.meta else path.with_name("metadata.json")
    table = FeatureTable.from_csv(path.read_text(), json.loads(meta.read_text()))
    if getattr(args, "features", None):
        table = table.select([f.strip() for f in args.features.split(",")])
    return table


def _write(out, name, text):
    (out / name).write_text(text)
    print(out / name)


def cmd_run(args):
    from .pipeline import run_pipeline
    cfg = _config(args)
    b = run_pipeline(cfg, out_dir=args.out)
    print(f"{len(b.files)} files written to {b.out_dir}; manifest.json lists their hashes")


def cmd_synth(args):
    from .synth import SynthSpec, synth_generate
    spec = json.loads(Path(args.spec).read_text()) if args.spec else {"segment": args.segment}
    for key, val in (("n", args.n), ("outlier_fraction", args.outlier_fraction), ("road_grid", args.road_grid)):
        if val is not None:
            spec[key] = val
    bundle = synth_generate(SynthSpec.from_dict(spec), seed=args.seed or 0)
    out = _out(args)
    for name in bundle.write(out):
        print(out / name)
    cfg = {"segment": bundle.truth["segment"], "seed": args.seed or 0,
           "inputs": {"records": "records.csv", "schema_file": "schema.json", "features": "features.json"}}
    if "poi.csv" in bundle.files:
        cfg["inputs"]["poi"] = "poi.csv"
    if "road_nodes.csv" in bundle.files:
        cfg["inputs"].update(road_nodes="road_nodes.csv", road_edges="road_edges.csv")
    _write(out, "config.json", json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def cmd_ingest(args):
    from .dataset import records_to_csv
    cfg = _config(args, "flat") if args.config else None
    if args.schema:
        from .dataset import parse_records
        records, rejects = parse_records(Path(args.records).read_bytes(), Path(args.schema).read_text())
    else:
        records, rejects = _read_records(args.records, cfg)
    out = _out(args, cfg)
    _write(out, "records.csv", records_to_csv(records))
    _write(out, "rejects.csv", "line,reason\n" + "".join(f"{r.line},{json.dumps(r.reason)}\n" for r in rejects))
    print(f"{len(records)} records, {len(rejects)} rejected", file=sys.stderr)


def cmd_clean(args):
    from .dataset import records_to_csv
    from .outliers import clean_pipeline
    from .pipeline import _clean_config
    cfg = _config(args)
    records, _ = _read_records(args.records, cfg)
    records = [r for r in records if r.segment == cfg.segment]
    kept, report = clean_pipeline(records, _clean_config(cfg))
    out = _out(args, cfg)
    _write(out, "records_clean.csv", records_to_csv(kept))
    _write(out, "outlier_report.csv", report.to_csv())


def cmd_features(args):
    from .pipeline import Bundle, _features
    cfg = _config(args)
    records, _ = _read_records(args.records, cfg)
    b = Bundle(config=cfg, out_dir=_out(args, cfg))
    b.kept = [r for r in records if r.segment == cfg.segment]
    _features(b)
    for k in b.files:
        print(b.out_dir / k)


def cmd_select(args):
    from .pipeline import Bundle, _selection
    cfg = _config(args)
    b = Bundle(config=cfg, out_dir=_out(args, cfg))
    b.table = _load_table(args)
    _selection(b)
    for k in b.files:
        print(b.out_dir / k)


def _fit(kind, table, cfg):
    from .pipeline import _rulefit_params
    if kind == "ols":
        from .linmodel import ols_fit
        fit = ols_fit(table.matrix, table.target, feature_names=table.names)
        return {"kind": "ols", "target_kind": table.target_kind, "fit": fit.to_dict()}, fit.summary()
    if kind == "rk":
        from .geostat import RegressionKriging
        rk = RegressionKriging(feature_names=table.names, **cfg.models.rk.model_dump())
        rk.fit(table.matrix, table.target, coords=table.coords)
        return ({"kind": "rk", "target_kind": table.target_kind, "ols": rk.ols_.to_dict(),
                 "kriging": rk.kriging_.to_dict(), "bias_correction": rk.bias_correction},
                rk.ols_.summary() + f"\nvariogram: {rk.kriging_.variogram_.to_dict()}\n")
    if kind == "rulefit":
        from .rulefit import rulefit_fit
        model = rulefit_fit(table, _rulefit_params(cfg))
        return ({"kind": "rulefit", "target_kind": table.target_kind, "model": json.loads(model.to_json())},
                model.to_csv())
    from .trees import ForestRegressor
    est = ForestRegressor(seed=cfg.seed, n_jobs=cfg.workers, **cfg.models.forest.model_dump())
    est.fit(table.matrix, table.target)
    return ({"kind": "forest", "target_kind": table.target_kind, "features": table.names,
             "forest": est.to_dict()}, f"forest of {len(est.trees_)} trees on {table.names}\n")


def cmd_fit(args):
    kind = args.command[4:]
    cfg = _config(args, "flat")
    table = _load_table(args)
    doc, text = _fit(kind, table, cfg)
    out = _out(args, cfg)
    _write(out, f"{kind}_model.json", json.dumps(doc, indent=1, sort_keys=True, default=float) + "\n")
    _write(out, f"{kind}_summary.txt", text)


def predict_saved(doc, table):
    """Target-scale predictions of a saved model document."""
    kind = doc["kind"]
    if kind == "ols":
        from .linmodel import OlsFit, predict
        fit = OlsFit.from_dict(doc["fit"])
        return predict(fit, table.select(fit.feature_names).matrix)
    if kind == "rk":
        from .geostat import OrdinaryKriging
        from .linmodel import OlsFit, predict
        fit = OlsFit.from_dict(doc["ols"])
        ok = OrdinaryKriging.from_dict(doc["kriging"])
        return predict(fit, table.select(fit.feature_names).matrix) + ok.predict(table.coords)
    if kind == "rulefit":
        from .rulefit import RuleFitModel, rulefit_predict
        model = RuleFitModel.from_json(json.dumps(doc["model"]))
        return rulefit_predict(model, table.select(list(model.feature_names)).matrix)
    from .trees import ForestRegressor
    est = ForestRegressor.from_dict(doc["forest"])
    return est.predict(table.select(doc["features"]).matrix)


def cmd_predict(args):
    doc = json.loads(Path(args.model).read_text())
    table = _load_table(args)
    pred = predict_saved(doc, table)
    psmp = np.exp(pred) if doc.get("target_kind") == "log_psmp" else pred
    out = _out(args)
    from .report import predicted_vs_actual_csv
    _write(out, f"predictions_{doc['kind']}.csv", predicted_vs_actual_csv(table.ids, table.psmp(), psmp, "apply"))


def cmd_evaluate(args):
    from .evaluation import format_reports, kfold_cv, reports_to_csv
    from .pipeline import _rulefit_params
    cfg = _config(args, "flat")
    table = _load_table(args)
    params = {"rk": cfg.models.rk.model_dump(), "rulefit": _rulefit_params(cfg),
              "forest": dict(cfg.models.forest.model_dump(), seed=cfg.seed)}.get(args.model, {})
    res = kfold_cv(args.model, table, args.k or cfg.evaluation.cv_folds, cfg.seed, params,
                   n_jobs=cfg.workers)
    reports = list(res.folds) + [res.mean]
    out = _out(args, cfg)
    _write(out, f"cv_{args.model}.csv", reports_to_csv(reports))
    print(format_reports(reports), end="")


def cmd_report(args):
    import csv
    from .evaluation import MetricReport, format_reports, reports_to_csv
    from .report import emit_report
    predictions, metrics = {}, []
    for path in args.predictions:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        tag = Path(path).stem.replace("predictions_", "")
        ids = [r["id"] for r in rows]
        a = np.array([float(r["actual"]) for r in rows])
        p = np.array([float(r["predicted"]) for r in rows])
        predictions[tag] = (ids, a, p, [r["split"] for r in rows])
        metrics.append(MetricReport.compute(a, p, 0, tag, "", rows[0]["split"] if rows else ""))
    out = _out(args)
    names = emit_report({"predictions": predictions, "metrics": metrics}, out)
    for n in names:
        print(out / n)
    print(format_reports(metrics), end="")


def cmd_schema(args):
    from .config import config_schema
    print(json.dumps(config_schema(), indent=1, sort_keys=True))


COMMANDS = {"run": cmd_run, "synth": cmd_synth, "ingest": cmd_ingest, "clean": cmd_clean,
            "features": cmd_features, "select": cmd_select, "fit-ols": cmd_fit, "fit-rk": cmd_fit,
            "fit-rulefit": cmd_fit, "fit-forest": cmd_fit, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "report": cmd_report, "schema": cmd_schema}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (AppraisalError, ValueError, OSError, KeyError) as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
