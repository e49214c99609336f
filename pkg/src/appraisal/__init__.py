"""Interpretable mass appraisal: outlier cleaning, spatial features, OLS with
diagnostics, regression-kriging and rule ensembles for price per square meter.
"""

from .dataset import FeatureTable, PropertyRecord, Scaler, compute_psmp, parse_records, split, standardize
from .evaluation import MetricReport, kfold_cv, mae, mape, r2_adj
from .exceptions import (AppraisalError, ConvergenceWarning, DataError, DegenerateDataWarning,
                         RankDeficiencyError, SchemaError, SingularSystemError, StageError)
from .geostat import OrdinaryKriging, RegressionKriging, VariogramModel, empirical_variogram, fit_exponential
from .linmodel import OLSRegressor, OlsFit, ols_fit
from .outliers import CleanConfig, DBSCANClusterer, KMeansClusterer, RansacLine, clean_pipeline
from .rulefit import RuleFitModel, RuleFitRegressor, lasso_cd, lasso_cv, rulefit_fit, rulefit_predict
from .trees import ForestRegressor, RegressionTree, fit_forest, fit_tree, forest_predict

__version__ = "0.1.0"

__all__ = [
    "AppraisalError", "CleanConfig", "ConvergenceWarning", "DBSCANClusterer", "DataError",
    "DegenerateDataWarning", "FeatureTable", "ForestRegressor", "KMeansClusterer", "MetricReport",
    "OLSRegressor", "OlsFit", "OrdinaryKriging", "PropertyRecord", "RankDeficiencyError", "RansacLine",
    "RegressionKriging", "RegressionTree", "RuleFitModel", "RuleFitRegressor", "Scaler", "SchemaError",
    "SingularSystemError", "StageError", "VariogramModel", "clean_pipeline", "compute_psmp",
    "empirical_variogram", "fit_exponential", "fit_forest", "fit_tree", "forest_predict", "kfold_cv",
    "lasso_cd", "lasso_cv", "mae", "mape", "ols_fit", "parse_records", "r2_adj", "rulefit_fit",
    "rulefit_predict", "split", "standardize",
]
