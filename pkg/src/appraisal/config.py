"""Pipeline configuration: a strict JSON document with a published schema.

Unknown keys are rejected at every level. Relative paths resolve against
the directory of the config file.
"""

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .exceptions import SchemaError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class InputsConfig(_Strict):
    records: str = Field("records.csv", description="Records CSV or GeoJSON file.")
    schema_file: Optional[str] = Field(None, description="Column mapping JSON for ingest.")
    features: Optional[str] = Field(None, description="Feature definitions JSON (list of objects).")
    poi: Optional[str] = Field(None, description="POI CSV (lon, lat, category) or GeoJSON.")
    road_nodes: Optional[str] = Field(None, description="Road node CSV (id, lon, lat).")
    road_edges: Optional[str] = Field(None, description="Road edge CSV (from_id, to_id, length_m, oneway).")


class OutliersConfig(_Strict):
    enabled: bool = True
    kmeans: bool = True
    n_clusters: Optional[int] = Field(None, ge=1, description="Default: max(2, round(n/500)).")
    robust: bool = True
    robust_method: Literal["iqr", "zscore"] = "iqr"
    robust_threshold: Optional[float] = Field(None, gt=0, description="Default 1.5 (iqr) or 3 (zscore).")
    cluster_median: bool = False
    screen: bool = True
    screen_bands: dict[str, tuple[float, float]] = Field(
        default_factory=lambda: {"deal": (50000.0, 100000.0)},
        description="Doubtful PSMP band per record source (flats).")
    dbscan: bool = True
    eps: float = Field(0.5, gt=0)
    min_pts: int = Field(5, ge=1)
    building_numeric: tuple[str, ...] = ("storeys_total", "year_built")
    building_categorical: tuple[str, ...] = ("wall_material",)
    drop_dbscan_noise: bool = False
    ransac: bool = True
    ransac_iter: int = Field(100, ge=1)
    ransac_threshold: Union[Literal["target_mad", "residual_mad"], float] = "target_mad"
    ransac_min_group: int = Field(10, ge=2)


class FeaturesConfig(_Strict):
    definitions: Optional[list[dict]] = Field(None, description="Inline definitions; overrides inputs.features.")
    origin: Optional[tuple[float, float]] = Field(None, description="Projection origin (lon, lat); default centroid.")
    road_max_nodes: int = Field(5000, ge=1)
    road_subsample: int = Field(2000, ge=2)


class SelectionConfig(_Strict):
    enabled: bool = True
    corr_threshold: float = Field(0.7, gt=0, le=1)
    min_target_corr: float = Field(0.15, ge=0, le=1, description="Pre-filter for the rule ensemble.")
    coef_p: float = 0.05
    f_p: float = 0.01
    dw_low: float = 1.5
    dw_high: float = 2.5
    jb_p: float = 0.05
    f_cap: float = 1e300


class RKConfig(_Strict):
    n_lags: int = Field(15, ge=2)
    max_dist: Optional[float] = Field(None, gt=0)
    n_neighbors: Optional[int] = Field(None, ge=1)
    full_threshold: int = Field(1000, ge=1)
    bias_correction: bool = False


class RuleFitConfig(_Strict):
    n_trees: int = Field(100, ge=1)
    max_depth: Optional[int] = Field(4, ge=1)
    min_leaf: int = Field(20, ge=1)
    feature_subsample: Optional[Union[int, float]] = 1 / 3
    bootstrap: bool = True
    rule_cap: int = Field(50, ge=0)
    n_folds: int = Field(5, ge=2)
    standardize_rules: bool = False
    subset_search_budget: int = Field(0, ge=0, description="0 disables the feature-subset search.")
    subset_max_size: int = Field(11, ge=1)


class ForestConfig(_Strict):
    n_trees: int = Field(100, ge=1)
    max_depth: Optional[int] = None
    min_leaf: int = Field(5, ge=1)
    feature_subsample: Optional[Union[int, float]] = None
    bootstrap: bool = True


class ModelsConfig(_Strict):
    fit: Optional[list[Literal["ols", "rk", "rulefit", "forest"]]] = Field(
        None, description="Default: ols+rk for land parcels, ols+rulefit+forest for flats.")
    rk: RKConfig = RKConfig()
    rulefit: RuleFitConfig = RuleFitConfig()
    forest: ForestConfig = ForestConfig()


class EvaluationConfig(_Strict):
    train_fraction: float = Field(0.7, gt=0, lt=1)
    cv_folds: int = Field(5, ge=2)
    cv_models: Optional[list[Literal["ols", "rk", "rulefit", "forest"]]] = Field(
        None, description="Default: the fitted models that are cheap to refit (ols, rk).")


class PipelineConfig(_Strict):
    segment: Literal["land_parcel", "flat"]
    seed: int = 0
    workers: int = Field(1, ge=1, description="Parallel workers; never changes results.")
    output_dir: str = "out"
    inputs: InputsConfig = InputsConfig()
    outliers: OutliersConfig = OutliersConfig()
    features: FeaturesConfig = FeaturesConfig()
    selection: SelectionConfig = SelectionConfig()
    models: ModelsConfig = ModelsConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    base_dir: str = Field(".", description="Directory that relative paths resolve against.")

    @field_validator("workers")
    @classmethod
    def _workers(cls, v):
        return int(v)

    def path(self, p):
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @property
    def fitted_models(self):
        if self.models.fit is not None:
            return list(self.models.fit)
        return ["ols", "rk"] if self.segment == "land_parcel" else ["ols", "rulefit", "forest"]

    @property
    def cv_models(self):
        if self.evaluation.cv_models is not None:
            return list(self.evaluation.cv_models)
        return [m for m in self.fitted_models if m in ("ols", "rk")]

    def canonical(self, include_runtime=True):
        """Canonical JSON text (sorted keys, defaults filled in).

        ``include_runtime=False`` drops fields that must not influence
        outputs (worker count, directories).
        """
        exclude = None if include_runtime else {"workers", "output_dir", "base_dir"}
        return json.dumps(self.model_dump(mode="json", exclude=exclude), indent=1, sort_keys=True)


def parse_config(source, base_dir=None, **overrides):
    """Validate a config from a dict, JSON text or file path.

    ``overrides`` replace top-level keys (e.g. ``seed``, ``workers``).
    """
    if isinstance(source, (str, Path)) and not str(source).lstrip().startswith("{"):
        path = Path(source)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise SchemaError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from None
        base_dir = base_dir or str(path.resolve().parent)
    elif isinstance(source, (str, bytes)):
        try:
            data = json.loads(source)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from None
    else:
        data = dict(source)
    if not isinstance(data, dict):
        raise SchemaError("config root must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    if base_dir is not None and "base_dir" not in data:
        data["base_dir"] = str(base_dir)
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise SchemaError(f"invalid config: {exc}") from None


def config_schema():
    """JSON schema of :class:`PipelineConfig`."""
    return PipelineConfig.model_json_schema()
