"""
Configuration models for the ACAT pipeline.

A run is described by one JSON document validated into RunConfig before any
work starts; unknown keys are rejected at every level.
"""

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_CF_ALPHA,
    DEFAULT_CF_STEP_SIZE,
    DEFAULT_CF_STEPS,
    DEFAULT_LEAKY_SLOPE,
    DEFAULT_LEARNING_RATE,
    DEFAULT_NOISE_SIGMA,
    IG_STEPS,
    LATENT_SHIFT_COUNT,
    LATENT_SHIFT_START,
)

TapLabel = Literal["early", "middle", "late", "none"]
TAP_ORDER = ("early", "middle", "late")
SALIENCY_METHODS = ("counterfactual", "norec", "latent_shift", "gradient", "integrated_gradients", "grad_cam")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LayerSpec(StrictModel):
    """One layer of a feature stack or classification head."""
    kind: Literal["conv", "pool", "activation", "linear", "dropout", "residual", "upsample"] = Field(
        ..., description="Layer type", examples=["conv"])
    channels: Optional[int] = Field(
        None, ge=1, description="Output channels (conv) or output features (linear)", examples=[16])
    in_channels: Optional[int] = Field(
        None, ge=1, description="Expected input channels; checked against the inferred value when given")
    kernel: int = Field(3, ge=1, description="Kernel size for conv/residual, window size for pool")
    stride: int = Field(1, ge=1, description="Convolution stride")
    padding: Optional[int] = Field(None, ge=0, description="Zero padding; defaults to (kernel - 1) // 2")
    activation: Literal["relu", "leaky_relu", "sigmoid"] = Field("leaky_relu", description="Activation function")
    slope: float = Field(DEFAULT_LEAKY_SLOPE, ge=0.0, description="Leaky ReLU negative slope")
    pool: Literal["max", "avg"] = Field("max", description="Pooling reduction")
    p: float = Field(0.0, ge=0.0, lt=1.0, description="Dropout probability; 1 is rejected")
    factor: int = Field(2, ge=1, description="Nearest-neighbour upsampling factor")
    tap_label: TapLabel = Field("none", description="Attention tap marker")

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind in ("conv", "linear") and self.channels is None:
            raise ValueError(f"{self.kind} layer needs 'channels'")
        if self.tap_label != "none" and self.kind not in ("conv", "residual"):
            raise ValueError(f"tap label '{self.tap_label}' can only mark a conv or residual layer, not {self.kind}")
        return self

    @property
    def resolved_padding(self) -> int:
        return (self.kernel - 1) // 2 if self.padding is None else self.padding


def conv(channels: int, tap: TapLabel = "none", stride: int = 1) -> LayerSpec:
    return LayerSpec(kind="conv", channels=channels, stride=stride, tap_label=tap)


def act(name: str = "leaky_relu") -> LayerSpec:
    return LayerSpec(kind="activation", activation=name)


def pool(kernel: int = 2) -> LayerSpec:
    return LayerSpec(kind="pool", kernel=kernel)


def default_classifier_layers() -> List[LayerSpec]:
    """Five 3x3 convs (8, 16, 16, 32, 32) with taps after the first, third and fifth."""
    return [
        conv(8, "early"), act(), pool(),
        conv(16), act(),
        conv(16, "middle"), act(), pool(),
        conv(32), act(),
        conv(32, "late"), act(), pool(),
    ]


def default_head_layers() -> List[LayerSpec]:
    return [LayerSpec(kind="linear", channels=32), act()]


def default_encoder_layers() -> List[LayerSpec]:
    return [
        conv(16, stride=2), act(), LayerSpec(kind="residual"),
        conv(32, stride=2), act(), LayerSpec(kind="residual"),
        conv(16, stride=2), act(), LayerSpec(kind="residual"),
    ]


def default_decoder_layers() -> List[LayerSpec]:
    return [
        LayerSpec(kind="residual"), LayerSpec(kind="upsample"), conv(32), act(),
        LayerSpec(kind="residual"), LayerSpec(kind="upsample"), conv(16), act(),
        LayerSpec(kind="residual"), LayerSpec(kind="upsample"), conv(1), act("sigmoid"),
    ]


class DatasetSpec(StrictModel):
    """Synthetic lesion-volume generator settings."""
    n_samples: int = Field(200, ge=1, description="Number of volumes")
    image_size: int = Field(64, ge=6, description="Square slice extent in pixels")
    n_slices: int = Field(3, ge=1, description="Slices per volume")
    class_probs: List[float] = Field(
        [0.40, 0.30, 0.29, 0.01], min_length=4, max_length=4,
        description="Probabilities of classes none, left, right, both")
    tier_probs: List[float] = Field(
        [0.25, 0.25, 0.25, 0.25], min_length=4, max_length=4, description="Lesion size tier distribution")
    tier_radius_fractions: List[List[float]] = Field(
        [[0.12, 0.17], [0.17, 0.22], [0.22, 0.27], [0.27, 0.32]], min_length=4, max_length=4,
        description="Per-tier [low, high) lesion radius as a fraction of the smaller region extent")
    contrast_range: List[float] = Field(
        [-0.20, -0.05], min_length=2, max_length=2, description="Lesion intensity delta range (negative)")
    tissue_intensity: float = Field(0.5, gt=0.0, lt=1.0)
    skull_intensity: float = Field(0.9, gt=0.0, le=1.0)
    skull_thickness: int = Field(2, ge=1)
    noise_std: float = Field(0.04, ge=0.0, description="Texture standard deviation after smoothing")
    noise_smoothing: float = Field(2.0, ge=0.0, description="Gaussian smoothing sigma of the texture noise")
    slice_radius_decay: float = Field(0.25, ge=0.0, lt=1.0, description="Relative radius shrink per slice away from the centre")
    grid_rows: int = Field(3, ge=1)
    grid_cols: int = Field(2, ge=2)
    seed: int = Field(0, description="Generator seed")

    @field_validator("class_probs", "tier_probs")
    @classmethod
    def _sums_to_one(cls, value):
        if any(p < 0 for p in value) or abs(sum(value) - 1.0) > 1e-6:
            raise ValueError(f"probabilities must be nonnegative and sum to 1, got {value}")
        return value

    @field_validator("contrast_range")
    @classmethod
    def _negative_contrast(cls, value):
        low, high = value
        if not low <= high < 0:
            raise ValueError(f"contrast range must satisfy low <= high < 0, got {value}")
        return value

    @field_validator("tier_radius_fractions")
    @classmethod
    def _ordered_tiers(cls, value):
        for low, high in value:
            if not 0 < low <= high:
                raise ValueError(f"tier radius bounds must satisfy 0 < low <= high, got {[low, high]}")
        return value


class ClassifierConfig(StrictModel):
    layers: List[LayerSpec] = Field(default_factory=default_classifier_layers)
    head: List[LayerSpec] = Field(default_factory=default_head_layers,
                                  description="Hidden head layers; the output linear layer is appended")
    num_classes: int = Field(4, ge=2)
    in_channels: int = Field(1, ge=1)
    slice_combine: Literal["mean"] = "mean"

    @model_validator(mode="after")
    def _unique_taps(self):
        labels = [layer.tap_label for layer in self.layers if layer.tap_label != "none"]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            raise ValueError(f"duplicate tap labels: {duplicates}")
        return self


class AutoencoderConfig(StrictModel):
    encoder: List[LayerSpec] = Field(default_factory=default_encoder_layers)
    decoder: List[LayerSpec] = Field(default_factory=default_decoder_layers)
    in_channels: int = Field(1, ge=1)


class OptimizerConfig(StrictModel):
    rule: Literal["sgd", "adam"] = "adam"
    learning_rate: float = Field(DEFAULT_LEARNING_RATE, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)


class TrainingConfig(StrictModel):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(DEFAULT_BATCH_SIZE, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    max_train_samples: Optional[int] = Field(None, ge=1, description="Cap on training volumes per epoch")


class CounterfactualConfig(StrictModel):
    target_class: int = Field(0, ge=0)
    alpha: float = Field(DEFAULT_CF_ALPHA, ge=0.0, description="Weight of the latent L1 proximity term")
    steps: int = Field(DEFAULT_CF_STEPS, ge=0)
    step_size: float = Field(DEFAULT_CF_STEP_SIZE, description="Descent step; negative values are only allowed with alpha 0")
    reference: Literal["input", "reconstruction"] = Field(
        "input", description="Image the counterfactual is differenced against")

    @model_validator(mode="after")
    def _step_sign(self):
        if self.step_size == 0:
            raise ValueError("step_size must be nonzero")
        if self.alpha > 0 and self.step_size < 0:
            raise ValueError("a negative step_size is only meaningful with alpha = 0")
        return self


class AttributionConfig(StrictModel):
    method: Literal["counterfactual", "norec", "latent_shift", "gradient", "integrated_gradients", "grad_cam"] = (
        "counterfactual")
    target_class: Optional[int] = Field(None, ge=0, description="Class scored; defaults to the predicted class")
    ig_steps: int = Field(IG_STEPS, ge=1)
    ig_baseline: float = Field(0.0, description="Constant baseline image value")
    grad_cam_layer: Optional[int] = Field(None, ge=0, description="Feature-stack index; defaults to the last conv")
    latent_shift_start: float = Field(LATENT_SHIFT_START, gt=0.0)
    latent_shift_count: int = Field(LATENT_SHIFT_COUNT, ge=1)
    latent_shift_sign: Literal["negative", "positive", "both"] = "negative"
    norec_step_size: float = Field(-5.0, description="Step of the unregularized variant")


class AcatConfig(StrictModel):
    use_early: bool = True
    use_middle: bool = True
    use_late: bool = True
    use_fusion: bool = True
    slice_combine: Literal["attention", "mean"] = "attention"
    attention_hidden: int = Field(16, ge=1)
    attention_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    tap_dropout: float = Field(0.0, ge=0.0, lt=1.0, description="Dropout at tap layers (dropout control)")
    init_from_baseline: bool = True
    saliency_method: Literal["counterfactual", "norec", "latent_shift", "gradient", "integrated_gradients",
                             "grad_cam"] = "counterfactual"
    training: TrainingConfig = Field(default_factory=TrainingConfig)


class EvaluationConfig(StrictModel):
    noise_sigma: float = Field(DEFAULT_NOISE_SIGMA, ge=0.0)
    saliency_methods: List[str] = Field(
        default_factory=lambda: ["counterfactual", "gradient", "integrated_gradients", "grad_cam", "latent_shift"])
    run_ablation: bool = False
    run_dropout_control: bool = False
    dropout_p_values: List[float] = Field(default_factory=lambda: [0.2, 0.6])
    method_ablation: List[str] = Field(
        default_factory=list, description="Saliency methods whose maps ACAT is additionally trained on")
    max_eval_positives: Optional[int] = Field(None, ge=1)

    @field_validator("saliency_methods", "method_ablation")
    @classmethod
    def _known_methods(cls, value):
        unknown = [m for m in value if m not in SALIENCY_METHODS]
        if unknown:
            raise ValueError(f"unknown saliency methods: {unknown}")
        return value

    @field_validator("dropout_p_values")
    @classmethod
    def _valid_p(cls, value):
        for p in value:
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout p must lie in [0, 1), got {p}")
        return value


class RunConfig(StrictModel):
    """Top-level run document."""
    seed: int = Field(0, description="Master seed; every stage seed derives from it")
    n_runs: int = Field(1, ge=1, description="Number of run seeds (dataset re-split and re-initialisation)")
    output_dir: Optional[str] = None
    threads: int = Field(1, ge=1)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    autoencoder: AutoencoderConfig = Field(default_factory=AutoencoderConfig)
    baseline_training: TrainingConfig = Field(default_factory=TrainingConfig)
    autoencoder_training: TrainingConfig = Field(default_factory=TrainingConfig)
    counterfactual: CounterfactualConfig = Field(default_factory=CounterfactualConfig)
    attribution: AttributionConfig = Field(default_factory=AttributionConfig)
    acat: AcatConfig = Field(default_factory=AcatConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "seed": 0,
                "n_runs": 3,
                "dataset": {"n_samples": 200, "image_size": 64, "n_slices": 3},
                "baseline_training": {"epochs": 20},
                "counterfactual": {"alpha": 100.0, "steps": 20, "step_size": 1.0},
            }
        },
    )

    @model_validator(mode="after")
    def _consistent(self):
        if self.dataset.n_slices < 1:
            raise ValueError("dataset must have at least one slice")
        if self.counterfactual.target_class >= self.classifier.num_classes:
            raise ValueError("counterfactual target_class outside the classifier's classes")
        return self
