"""JSON override files for the pipeline and training configs.

Layout (every section and key optional)::

    {
      "solver":    {SolverConfig fields},
      "predictor": {PredictorConfig fields},
      "pipeline":  {"ransac_threshold", "outlier_fraction", "nominal_confidence",
                    "aggressive_confidence", "prefilter_deg", "sigma_px"},
      "training":  {"iterations", "mode", "policy", "subset_fraction", "loop", "folds",
                    "k_candidates", "gamma_candidates"}
    }
"""

from __future__ import annotations

import json
from dataclasses import fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .estimator import SolverConfig
from .frontend import PipelineConfig
from .predictors import PredictorConfig
from .training import TrainingConfig

PIPELINE_KEYS = ("ransac_threshold", "outlier_fraction", "nominal_confidence", "aggressive_confidence",
                 "prefilter_deg", "sigma_px")
TRAINING_KEYS = ("iterations", "mode", "policy", "subset_fraction", "loop", "folds",
                 "k_candidates", "gamma_candidates")
SECTIONS = ("solver", "predictor", "pipeline", "training")


def _apply(obj, section: str, values: dict, allowed=None):
    if not isinstance(values, dict):
        raise ConfigurationError(f"config section '{section}' must be an object")
    allowed = allowed or tuple(f.name for f in fields(obj))
    for key in values:
        if key not in allowed:
            raise ConfigurationError(f"unknown config key '{section}.{key}'")
    try:
        return replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config section '{section}': {exc}") from exc


def parse_overrides(raw: dict) -> tuple[PipelineConfig, TrainingConfig]:
    if not isinstance(raw, dict):
        raise ConfigurationError("config file must hold a JSON object")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigurationError(f"unknown config section '{key}'")
    solver = _apply(SolverConfig(), "solver", raw.get("solver", {}))
    predictor = _apply(PredictorConfig(), "predictor", raw.get("predictor", {}))
    pipeline = _apply(PipelineConfig(solver=solver, predictor=predictor), "pipeline",
                      raw.get("pipeline", {}), PIPELINE_KEYS)
    training_raw = dict(raw.get("training", {}))
    for key in ("k_candidates", "gamma_candidates"):
        if key in training_raw:
            training_raw[key] = tuple(training_raw[key])
    training = _apply(TrainingConfig(), "training", training_raw, TRAINING_KEYS)
    return pipeline, training


def load_overrides(path: str | Path | None) -> tuple[PipelineConfig, TrainingConfig]:
    if path is None:
        return PipelineConfig(), TrainingConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_overrides(raw)
