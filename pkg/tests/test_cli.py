import json

import pytest

from appraisal.cli import EXIT_OK, EXIT_STAGE, EXIT_USAGE, main
from appraisal.config import PipelineConfig, config_schema, parse_config
from appraisal.exceptions import SchemaError, StageError
from appraisal.pipeline import run_pipeline
from appraisal.synth import SynthSpec, synth_generate


def test_config_defaults_and_round_trip(tmp_path):
    cfg = parse_config({"segment": "flat", "seed": 3})
    assert cfg.fitted_models == ["ols", "rulefit", "forest"]
    assert cfg.cv_models == ["ols"]
    land = parse_config('{"segment": "land_parcel"}')
    assert land.fitted_models == ["ols", "rk"] and land.cv_models == ["ols", "rk"]
    back = parse_config(json.loads(cfg.canonical()))
    assert back == cfg
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"segment": "flat"}))
    assert parse_config(path, workers=4).workers == 4
    assert parse_config(path).base_dir == str(tmp_path.resolve())
    # runtime fields never reach the content hash
    assert parse_config(path, workers=4).canonical(False) == parse_config(path).canonical(False)


@pytest.mark.parametrize("doc", [
    {"segment": "flat", "colour": "red"},
    {"segment": "flat", "models": {"rulefit": {"n_tress": 10}}},
    {"segment": "house"},
    {"seed": 1},
    "[1, 2]",
    "{not json",
])
def test_config_rejects_bad_documents(doc):
    with pytest.raises(SchemaError):
        parse_config(doc)


def test_config_is_frozen_and_schema_is_published():
    cfg = parse_config({"segment": "flat"})
    with pytest.raises(Exception):
        cfg.seed = 5
    schema = config_schema()
    assert schema["additionalProperties"] is False
    assert "segment" in schema["required"]
    assert isinstance(cfg, PipelineConfig)


def test_cli_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["run"]) == EXIT_USAGE  # --config is required
    assert main(["--help"]) == EXIT_OK


def test_cli_schema_command(capsys):
    assert main(["schema"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert "properties" in doc


def test_cli_bad_config_is_usage_error(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"segment": "flat", "unknown": 1}))
    assert main(["run", "--config", str(path)]) == EXIT_USAGE


def test_cli_stage_failure_exit_code_and_partial_manifest(tmp_path):
    (tmp_path / "records.csv").write_text("id,segment,source,lon,lat,area,total_price\n"
                                          "a,flat,deal,131.9,43.1,50,5000000\n")
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"segment": "land_parcel"}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(path), "--out", str(out)]) == EXIT_STAGE
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed" and manifest["failed_stage"] == "collect"
    with pytest.raises(StageError):
        run_pipeline(parse_config(path), out_dir=tmp_path / "again")


@pytest.fixture(scope="module")
def land_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("land")
    assert main(["synth", "--segment", "land_parcel", "--n", "300", "--seed", "1",
                 "--out", str(root / "s")]) == EXIT_OK
    assert main(["run", "--config", str(root / "s" / "config.json"), "--out", str(root / "r")]) == EXIT_OK
    return root


def test_cli_run_writes_manifest_of_every_file(land_run):
    r = land_run / "r"
    manifest = json.loads((r / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["stages_completed"] == ["collect", "outliers", "features", "selection", "model",
                                            "evaluate", "report"]
    listed = {f["path"] for f in manifest["files"]}
    on_disk = {str(p.relative_to(r)) for p in r.rglob("*") if p.is_file()} - {"manifest.json"}
    assert listed == on_disk


def test_cli_model_subcommands_on_feature_table(land_run, capsys):
    r = land_run / "r"
    table, meta = str(r / "features" / "table.csv"), str(r / "features" / "metadata.json")
    cfg = str(land_run / "s" / "config.json")
    out = land_run / "m"
    feats = "area,dist_center"
    assert main(["fit-ols", table, "--meta", meta, "--features", feats, "--config", cfg,
                 "--out", str(out)]) == EXIT_OK
    assert main(["predict", str(out / "ols_model.json"), table, "--meta", meta, "--out", str(out)]) == EXIT_OK
    pred = (out / "predictions_ols.csv").read_text().splitlines()
    assert pred[0] == "id,actual,predicted,split" and len(pred) > 100
    assert main(["evaluate", table, "--meta", meta, "--features", feats, "--k", "3", "--config", cfg,
                 "--out", str(out)]) == EXIT_OK
    assert "cv_mean" in (out / "cv_ols.csv").read_text()
    assert main(["report", str(out / "predictions_ols.csv"), "--out", str(out / "rep")]) == EXIT_OK
    assert (out / "rep" / "pred_vs_actual_ols.csv").exists()
    assert main(["fit-ols", str(out / "missing.csv"), "--config", cfg]) == EXIT_STAGE


def test_cli_ingest_lists_rejects(tmp_path):
    (tmp_path / "in.csv").write_text("id,segment,source,lon,lat,area,total_price\n"
                                     "a,flat,deal,131.9,43.1,50,5000000\n"
                                     "b,flat,deal,131.9,43.1,-5,5000000\n")
    assert main(["ingest", str(tmp_path / "in.csv"), "--out", str(tmp_path)]) == EXIT_OK
    rejects = (tmp_path / "rejects.csv").read_text().splitlines()
    assert rejects[0] == "line,reason" and rejects[1].startswith("3,")


def test_synth_truth_is_seeded():
    a = synth_generate(SynthSpec(segment="flat", n=200, outlier_fraction=0.05), seed=2)
    b = synth_generate(SynthSpec(segment="flat", n=200, outlier_fraction=0.05), seed=2)
    assert a.files == b.files
    assert len(a.truth["outlier_ids"]) == 10
    assert a.truth["step"]["n_flats"] > 0
    land = synth_generate(SynthSpec(n=100), seed=0)
    assert set(land.files) >= {"records.csv", "poi.csv", "schema.json", "features.json", "truth.json"}


def test_synth_closed_loop_recovers_trend():
    from appraisal.features import build_feature_table
    from appraisal.linmodel import ols_fit
    b = synth_generate(SynthSpec(n=400, noise_sd=0.0, field_partial_sill=0.0), seed=3)
    assert b.truth["outlier_ids"] == []
    origin = (b.truth["spec"]["origin_lon"], b.truth["spec"]["origin_lat"])
    t = build_feature_table(b.records, b.definitions, origin=origin, layers=b.layers, target="log_psmp")
    fit = ols_fit(t.matrix, t.target, t.names)
    trend = b.truth["trend"]
    assert abs(fit.residuals).max() < 1e-9
    assert fit.intercept == pytest.approx(trend["intercept"], rel=1e-6)
    for name, coef in zip(t.names, fit.coef):
        assert coef == pytest.approx(trend[name], rel=1e-6)
