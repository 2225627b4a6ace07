"""
Pydantic models for the ACAT pipeline.
"""

from .config_models import (
    AcatConfig,
    AttributionConfig,
    AutoencoderConfig,
    ClassifierConfig,
    CounterfactualConfig,
    DatasetSpec,
    EvaluationConfig,
    LayerSpec,
    OptimizerConfig,
    RunConfig,
    TrainingConfig,
)
from .report_models import (
    ClassificationReport,
    EpochRecord,
    EvalReport,
    StageRecord,
    TrainingLog,
)

__all__ = [
    "AcatConfig",
    "AttributionConfig",
    "AutoencoderConfig",
    "ClassifierConfig",
    "CounterfactualConfig",
    "DatasetSpec",
    "EvaluationConfig",
    "LayerSpec",
    "OptimizerConfig",
    "RunConfig",
    "TrainingConfig",
    "ClassificationReport",
    "EpochRecord",
    "EvalReport",
    "StageRecord",
    "TrainingLog",
]
