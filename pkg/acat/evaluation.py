"""
Evaluation protocols: localization scores, classification metrics,
pre-activation variance, and the ablation and dropout-control harnesses.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import binomtest

from artifact_store import ArtifactStore
from attention import build_acat_model, dropout_control_model
from counterfactual import SaliencyMap
from models.config_models import AcatConfig, ClassifierConfig, TrainingConfig
from models.report_models import ClassificationReport, EvalReport
from nets import ModelGraph, VolumeBatch, classifier_from_config, collect_preactivations, train_model
from synth_data import Geometry, SynthDataset, region_of_pixel, split_indices
from tensor_core import no_grad, softmax
from utils.file_utils import config_hash
from utils.map_utils import volume_max

logger = logging.getLogger(__name__)

MapLike = Union[SaliencyMap, np.ndarray]
Truth = Union[int, Sequence[int]]

ABLATION_VARIANTS: List[Tuple[str, Dict[str, bool]]] = [
    ("full", {}),
    ("no_fusion", {"use_fusion": False}),
    ("no_fusion_late", {"use_fusion": False, "use_late": False}),
    ("no_fusion_late_middle", {"use_fusion": False, "use_late": False, "use_middle": False}),
]


def _plane(map_like: MapLike) -> np.ndarray:
    values = map_like.values if isinstance(map_like, SaliencyMap) else np.asarray(map_like)
    return volume_max(values)


def _truth_set(truth: Truth) -> set:
    if isinstance(truth, (int, np.integer)):
        return {int(truth)}
    return {int(t) for t in truth}


def pointing_hits(maps: Sequence[MapLike], truths: Sequence[Truth], geometry: Geometry) -> List[bool]:
    """Per map, whether its top pixel (first in raster order on ties) falls in a true region."""
    if len(maps) == 0:
        raise ValueError("pointing game needs at least one map")
    if len(maps) != len(truths):
        raise ValueError(f"{len(maps)} maps but {len(truths)} ground-truth entries")
    hits = []
    for map_like, truth in zip(maps, truths):
        plane = _plane(map_like)
        if plane.shape != (geometry.height, geometry.width):
            raise ValueError(f"map extent {plane.shape} does not match geometry {geometry.height}x{geometry.width}")
        h, w = divmod(int(np.argmax(plane)), plane.shape[1])
        hits.append(int(region_of_pixel(h, w, geometry)) in _truth_set(truth))
    return hits


def pointing_game(maps: Sequence[MapLike], truths: Sequence[Truth], geometry: Geometry) -> float:
    """Hits / (hits + misses) over volume-max reduced maps."""
    hits = pointing_hits(maps, truths, geometry)
    return sum(hits) / len(hits)


def binomial_interval(hits: int, trials: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Exact (Clopper-Pearson) interval for a hit rate."""
    interval = binomtest(int(hits), int(trials)).proportion_ci(confidence_level=confidence, method="exact")
    return float(interval.low), float(interval.high)


def iou_dice(map_like: MapLike, truth_mask: np.ndarray) -> Tuple[float, float]:
    """
    IoU and Dice of the map binarized to its |truth| highest pixels.

    Ties at the threshold go to the lowest flat index.
    """
    values = np.asarray(map_like.values if isinstance(map_like, SaliencyMap) else map_like, dtype=np.float64).ravel()
    truth = np.asarray(truth_mask).astype(bool).ravel()
    if values.size != truth.size:
        raise ValueError(f"map has {values.size} pixels, mask has {truth.size}")
    n = int(truth.sum())
    if n == 0:
        raise ValueError("ground-truth mask is empty")
    chosen = np.zeros_like(truth)
    chosen[np.argsort(-values, kind="stable")[:n]] = True
    intersection = int(np.sum(chosen & truth))
    union = 2 * n - intersection
    return intersection / union, 2 * intersection / (2 * n)


def classification_metrics(probs: np.ndarray, labels: np.ndarray, num_classes: Optional[int] = None,
                           tiers: Optional[np.ndarray] = None) -> ClassificationReport:
    """
    Confusion-matrix metrics; sensitivity and specificity treat every non-zero class as "lesion".

    Metrics with no supporting samples are None rather than 0.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise ValueError(f"probabilities {probs.shape} do not match {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("no samples to score")
    k = num_classes or probs.shape[1]
    predictions = np.argmax(probs, axis=1)
    matrix = np.zeros((k, k), dtype=np.int64)
    np.add.at(matrix, (labels, predictions), 1)

    row_totals = matrix.sum(axis=1)
    per_class = [float(matrix[i, i] / row_totals[i]) if row_totals[i] else None for i in range(k)]
    positive, predicted_positive = labels != 0, predictions != 0
    sensitivity = float(np.mean(predicted_positive[positive])) if positive.any() else None
    specificity = float(np.mean(~predicted_positive[~positive])) if (~positive).any() else None

    per_tier: Dict[str, Optional[float]] = {}
    if tiers is not None:
        tiers = np.asarray(tiers)
        for tier in range(1, 5):
            selected = tiers == tier
            per_tier[str(tier)] = float(np.mean(predictions[selected] == labels[selected])) if selected.any() else None

    return ClassificationReport(
        accuracy=float(np.trace(matrix) / matrix.sum()),
        per_class_accuracy=per_class,
        sensitivity=sensitivity,
        specificity=specificity,
        confusion_matrix=matrix.tolist(),
        per_tier_accuracy=per_tier,
        n_samples=int(len(labels)),
    )


def predict_probabilities(model, batch: VolumeBatch, chunk: int = 16) -> np.ndarray:
    """Eval-mode class probabilities, computed in chunks without recording a graph."""
    model.eval()
    parts = []
    with no_grad():
        for start in range(0, len(batch), chunk):
            part = batch.subset(np.arange(start, min(start + chunk, len(batch))))
            parts.append(softmax(model.batch_logits(part), axis=-1).data)
    return np.concatenate(parts, axis=0)


def accuracy(model, batch: VolumeBatch) -> float:
    return float(np.mean(np.argmax(predict_probabilities(model, batch), axis=1) == batch.labels))


def preactivation_variance(model, batch: VolumeBatch, noise_sigma: float = 0.0, seed: int = 0) -> List[float]:
    """
    Per parameterized layer, the variance of its pre-activations over the batch
    and spatial positions, averaged over channels.

    Args:
        noise_sigma: Standard deviation of Gaussian noise added to the images (not clipped)
        seed: Seeds the noise
    """
    if noise_sigma > 0:
        noise = np.random.default_rng(seed).normal(0.0, noise_sigma, size=batch.images.shape)
        batch = VolumeBatch(images=(batch.images + noise).astype(np.float32), labels=batch.labels,
                            saliency=batch.saliency)
    model.eval()
    variances = []
    for z in collect_preactivations(model, batch):
        values = z.data.astype(np.float64)
        axes = (0, 2, 3) if values.ndim == 4 else (0,)
        variances.append(float(np.mean(np.var(values, axis=axes))))
    return variances


def summarize(metric: str, label: str, values: Sequence[float], seeds: Sequence[int], hash_: str = "",
              per_class: Optional[Dict[str, Optional[float]]] = None) -> EvalReport:
    """Mean over runs with the standard error (ddof 1) when there are at least two runs."""
    values = [float(v) for v in values]
    se = float(np.std(values, ddof=1) / np.sqrt(len(values))) if len(values) >= 2 else None
    return EvalReport(metric=metric, label=label, value=float(np.mean(values)), standard_error=se,
                      config_hash=hash_, seeds=list(seeds), run_values=values, per_class=per_class or {})


def reports_to_frame(reports: Iterable[EvalReport]) -> pd.DataFrame:
    """One row per run."""
    rows = []
    for report in reports:
        for seed, value in zip(report.seeds, report.run_values):
            rows.append({"metric": report.metric, "label": report.label, "seed": seed,
                         "value": value, "config_hash": report.config_hash})
    return pd.DataFrame(rows, columns=["metric", "label", "seed", "value", "config_hash"])


def write_csv(store: ArtifactStore, directory: str, filename: str, frame: pd.DataFrame) -> str:
    return store.save_file(directory, filename, frame.to_csv(index=False, float_format="%.6f", lineterminator="\n"))


def confusion_frame(report: ClassificationReport) -> pd.DataFrame:
    """Rows are true classes, columns predicted classes."""
    k = len(report.confusion_matrix)
    frame = pd.DataFrame(report.confusion_matrix, columns=[f"pred_{i}" for i in range(k)])
    frame.insert(0, "true", list(range(k)))
    return frame


@dataclass
class AcatExperiment:
    """
    Everything the ablation and dropout-control harnesses train from.

    ``saliency`` holds maps for every sample, [N, S, 1, H, W], either shared by
    all seeds or keyed by seed. ``baselines`` caches trained baselines by seed.
    """
    dataset: SynthDataset
    saliency: Union[np.ndarray, Dict[int, np.ndarray]]
    classifier: ClassifierConfig
    acat: AcatConfig
    baseline_training: TrainingConfig
    baselines: Dict[int, ModelGraph] = field(default_factory=dict)

    def maps(self, seed: int) -> np.ndarray:
        return self.saliency[seed] if isinstance(self.saliency, dict) else self.saliency

    def split(self, seed: int, maps: Optional[np.ndarray] = None) -> Tuple[VolumeBatch, VolumeBatch]:
        maps = self.maps(seed) if maps is None else maps
        splits = split_indices(len(self.dataset), seed)
        train = self.dataset.batch(splits["train"]).with_saliency(maps[splits["train"]])
        test = self.dataset.batch(splits["test"]).with_saliency(maps[splits["test"]])
        return train, test

    def baseline(self, seed: int, train: VolumeBatch) -> ModelGraph:
        if seed not in self.baselines:
            model = classifier_from_config(self.classifier, self.dataset.spec.image_size, seed, name="baseline")
            train_model(model, train, self.baseline_training.epochs, seed, "cross_entropy", self.baseline_training)
            self.baselines[seed] = model
        return self.baselines[seed]


def run_ablation_suite(experiment: AcatExperiment, seeds: Sequence[int]) -> List[EvalReport]:
    """
    Train and test the full model and its three progressively ablated variants on every seed.

    Returns:
        One test-accuracy report per variant, in removal order
    """
    results: Dict[str, List[float]] = {name: [] for name, _ in ABLATION_VARIANTS}
    for seed in seeds:
        train, test = experiment.split(seed)
        baseline = experiment.baseline(seed, train)
        for name, changes in ABLATION_VARIANTS:
            variant = experiment.acat.model_copy(update=changes)
            model = build_acat_model(baseline, variant, seed, name=f"acat-{name}")
            train_model(model, train, variant.training.epochs, seed, "cross_entropy", variant.training)
            results[name].append(accuracy(model, test))
            logger.info(f"🧪 Ablation {name} seed {seed}: test accuracy {results[name][-1]:.4f}")
    return [summarize("test_accuracy", name, results[name], seeds,
                      config_hash(experiment.acat.model_copy(update=changes)))
            for name, changes in ABLATION_VARIANTS]


def saliency_method_suite(experiment: AcatExperiment, maps_by_method: Dict[str, Dict[int, np.ndarray]],
                          seeds: Sequence[int]) -> List[EvalReport]:
    """Full ACAT test accuracy when trained on the maps of each saliency method."""
    results: Dict[str, List[float]] = {method: [] for method in maps_by_method}
    for seed in seeds:
        for method, maps in maps_by_method.items():
            train, test = experiment.split(seed, maps[seed])
            baseline = experiment.baseline(seed, train)
            model = build_acat_model(baseline, experiment.acat, seed, name=f"acat-{method}")
            train_model(model, train, experiment.acat.training.epochs, seed, "cross_entropy", experiment.acat.training)
            results[method].append(accuracy(model, test))
            logger.info(f"🧪 Maps from {method} seed {seed}: test accuracy {results[method][-1]:.4f}")
    return [summarize("test_accuracy", f"maps_{method}", results[method], seeds,
                      config_hash(experiment.acat.model_copy(update={"saliency_method": method})))
            for method in maps_by_method]


def dropout_control(experiment: AcatExperiment, p_values: Sequence[float], seeds: Sequence[int]) -> List[EvalReport]:
    """
    Fine-tune the baseline with dropout at the tap layers instead of attention, one report per ``p``.
    """
    for p in p_values:
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout control p must lie in [0, 1), got {p}")
    results: Dict[float, List[float]] = {p: [] for p in p_values}
    training = experiment.acat.training
    for seed in seeds:
        train, test = experiment.split(seed)
        baseline = experiment.baseline(seed, train)
        for p in p_values:
            model = dropout_control_model(baseline, p, seed)
            train_model(model, train, training.epochs, seed, "cross_entropy", training)
            results[p].append(accuracy(model, test))
            logger.info(f"🧪 Dropout control p={p} seed {seed}: test accuracy {results[p][-1]:.4f}")
    return [summarize("test_accuracy", f"dropout_p{p:g}", results[p], seeds,
                      config_hash({"tap_dropout": p, "training": training.model_dump(mode="json")}))
            for p in p_values]
