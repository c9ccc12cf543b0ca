"""Timbre matching for a flue-pipe physical model.

Neural networks propose parameter vectors from target features, a selection
stage keeps the closest candidate, and random iterative search refines it
against weighted acoustic distances.
"""
from .errors import FluematchError
from .features import AnalysisConfig, FeatureVector, extract_features
from .metrics import (ENVELOPE_COST, HARMONIC_COST, MetricId, WeightedCost, envelope_distance,
                      evaluate_cost, harmonic_distance, weighted_harmonic_distance)
from .model import render_tone
from .neural import Mlp, MlpSpec, TrainConfig, hyperparameter_search, train
from .params import ParamVector
from .search import (MorisConfig, RenderSettings, SelectionConfig, envelope_run, harmonic_run,
                     moris_optimize, ris_optimize, run_pipeline, select_best)
from .tone import Tone, note_to_f0

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig", "ENVELOPE_COST", "FeatureVector", "FluematchError", "HARMONIC_COST", "MetricId",
    "Mlp", "MlpSpec", "MorisConfig", "ParamVector", "RenderSettings", "SelectionConfig", "Tone",
    "TrainConfig", "WeightedCost", "envelope_distance", "envelope_run", "evaluate_cost", "extract_features",
    "harmonic_distance", "harmonic_run", "hyperparameter_search", "moris_optimize", "note_to_f0",
    "render_tone", "ris_optimize", "run_pipeline", "select_best", "train", "weighted_harmonic_distance",
]
