"""
Report models emitted by training, evaluation and the pipeline stages.
"""

from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class EpochRecord(BaseModel):
    epoch: int = Field(..., ge=0)
    loss: float
    accuracy: Optional[float] = Field(None, description="Training accuracy; absent for reconstruction losses")


class TrainingLog(BaseModel):
    """Per-epoch training record."""
    model_name: str
    loss: str
    seed: int
    epochs: List[EpochRecord] = Field(default_factory=list)

    def losses(self) -> List[float]:
        return [record.loss for record in self.epochs]


class ClassificationReport(BaseModel):
    """Confusion-matrix derived metrics; None marks a metric that is undefined on the data."""
    accuracy: float
    per_class_accuracy: List[Optional[float]]
    sensitivity: Optional[float] = Field(None, description="Lesion-vs-none recall of the lesion side")
    specificity: Optional[float] = Field(None, description="Lesion-vs-none recall of the none side")
    confusion_matrix: List[List[int]]
    per_tier_accuracy: Dict[str, Optional[float]] = Field(default_factory=dict)
    n_samples: int


class EvalReport(BaseModel):
    """One metric aggregated over run seeds."""
    metric: str = Field(..., examples=["test_accuracy"])
    label: str = Field("", description="Model, method or configuration the metric belongs to", examples=["acat"])
    value: float = Field(..., description="Mean over runs")
    standard_error: Optional[float] = Field(None, description="Reported only when there are at least two runs")
    config_hash: str = ""
    seeds: List[int] = Field(default_factory=list)
    run_values: List[float] = Field(default_factory=list)
    per_class: Dict[str, Optional[float]] = Field(default_factory=dict)

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "metric": "pointing_game",
                "label": "counterfactual",
                "value": 0.62,
                "standard_error": 0.03,
                "config_hash": "3f2a...",
                "seeds": [11, 12, 13],
                "run_values": [0.6, 0.59, 0.67],
            }
        }
    )


class StageRecord(BaseModel):
    """Resume record written next to a stage's outputs."""
    stage: str
    key: str = Field(..., description="SHA-256 over the stage config subsection and input checksums")
    seed: Optional[int] = None
    version: str
    config_hash: str
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict, description="Relative path -> SHA-256")
