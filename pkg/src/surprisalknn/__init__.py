"""Targetless k-nearest-neighbor learning with surprisal and conviction measures."""

from .conviction import (
    case_report,
    distance_contribution,
    expected_information,
    familiarity_conviction,
    familiarity_convictions,
    feature_prediction_contribution,
    feature_prediction_contributions,
    feature_prediction_conviction,
    feature_prediction_convictions,
    feature_report,
    model_surprisal,
    point_probabilities,
    prediction_conviction,
    prediction_convictions,
    self_information,
)
from .data import Case, Dataset, FeatureKind, FeatureSchema, infer_schema, mask_values, parse_table, read_schema_file
from .engine import Model, knn_query, local_model, react
from .errors import CorruptionError, DataError, InfeasibleError, SurprisalKNNError, UsageError
from .evaluation import evaluate, mann_whitney_u, wilcoxon_signed_rank
from .explain import ExplanationBundle, explain_react
from .imputation import impute, replay_imputation
from .metric import DeviationMode, DeviationVector, MetricConfig, case_distance, generalized_mean, lk_expected_distance_normal
from .persistence import load, save
from .reduction import detect_anomalies, prune_cases, prune_features, reduce_model
from .residuals import bootstrap_deviations, fit, holdout_residuals, iterate_residuals
from .synthesis import SynthesisRequest, synthesize

__version__ = "0.1.0"
