"""
Counterfactual search in autoencoder latent space and the saliency maps built from it.

The search minimises ``CE(f(D(z)), target) + alpha * mean|z - E(x)|``. Each
step takes a gradient step on the cross-entropy term (gradients flow through
the decoder and the classifier) followed by the proximal step of the L1
term, a soft threshold of ``step_size * alpha / n`` around ``E(x)``.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from config import LATENT_SHIFT_COUNT, LATENT_SHIFT_START, PROBABILITY_EPSILON
from errors import NonFiniteError
from models.config_models import CounterfactualConfig
from tensor_core import Tensor, backward, cross_entropy, l1_distance, no_grad, softmax, reshape
from utils.map_utils import channel_max, normalize_per_slice

logger = logging.getLogger(__name__)


class Classifier(Protocol):
    """Anything mapping [B, S, C, H, W] volumes to [B, K] logits."""

    def logits(self, images, observer=None) -> Tensor:
        ...


class LatentCodec(Protocol):
    def encode(self, x) -> Tensor:
        ...

    def decode(self, z) -> Tensor:
        ...


@dataclass
class TraceStep:
    step: int
    latent: np.ndarray
    image: np.ndarray
    probs: np.ndarray
    objective: float
    ce: float
    l1: float


@dataclass
class CounterfactualTrace:
    """Every iterate of one counterfactual search, the starting point included."""
    target_class: int
    alpha: float
    step_size: float
    steps: List[TraceStep] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def final_latent(self) -> np.ndarray:
        return self.steps[-1].latent

    @property
    def counterfactual(self) -> np.ndarray:
        return self.steps[-1].image

    def class_probabilities(self, class_index: int) -> np.ndarray:
        return np.array([step.probs[class_index] for step in self.steps])

    def objectives(self) -> np.ndarray:
        return np.array([step.objective for step in self.steps])

    def latent_displacement(self) -> float:
        """L1 distance between the final latent and the starting latent."""
        return float(np.sum(np.abs(self.steps[-1].latent.astype(np.float64) - self.steps[0].latent)))

    def to_jsonl(self) -> str:
        lines = []
        for step in self.steps:
            lines.append(json.dumps({
                "step": step.step,
                "objective": round(step.objective, 8),
                "ce": round(step.ce, 8),
                "l1": round(step.l1, 8),
                "probs": [round(float(p), 8) for p in step.probs],
            }, sort_keys=True))
        return "\n".join(lines) + "\n"


@dataclass
class LatentShiftPoint:
    shift: float
    source_probability: float
    target_loss: float
    probs: np.ndarray


@dataclass
class LatentShiftResult:
    source_class: int
    target_class: int
    curve: List[LatentShiftPoint]
    best_index: int
    best_image: np.ndarray

    @property
    def best_shift(self) -> float:
        return self.curve[self.best_index].shift


@dataclass
class SaliencyMap:
    """Per-slice map of a volume with provenance."""
    values: np.ndarray
    method: str
    source_model: str
    class_target: Optional[Union[int, Tuple[int, ...]]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 3:
            self.values = self.values[None]
        if self.values.ndim != 4 or self.values.shape[1] != 1:
            raise ValueError(f"saliency map must be [S, 1, H, W], got {self.values.shape}")

    def reduced(self) -> np.ndarray:
        """Maximum over slices, [H, W]."""
        return self.values[:, 0].max(axis=0)


def _volume(x) -> np.ndarray:
    values = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    if values.ndim == 5 and values.shape[0] == 1:
        values = values[0]
    if values.ndim != 4:
        raise ValueError(f"expected one [S, C, H, W] volume, got {values.shape}")
    return values


def _model_flags(f, ae) -> Dict[str, Any]:
    flags = {"classifier_trained": bool(getattr(f, "trained", False)),
             "autoencoder_trained": bool(getattr(ae, "trained", False))}
    if not (flags["classifier_trained"] and flags["autoencoder_trained"]):
        logger.warning("⚠️ Counterfactual search with an untrained classifier or autoencoder")
    return flags


def _decode_volume(ae: LatentCodec, z: Tensor) -> Tensor:
    image = ae.decode(z)
    return reshape(image, (1,) + image.shape)


def optimize_counterfactual(f: Classifier, ae: LatentCodec, x, cfg: CounterfactualConfig) -> CounterfactualTrace:
    """
    Search the latent space for an image ``f`` assigns to ``cfg.target_class``.

    Each step descends the cross-entropy, then applies the L1 term through its
    proximal map: the displacement from the starting latent is soft-thresholded
    by |step_size| * alpha / n instead of taking a subgradient step.

    Args:
        f: Classifier over volumes
        ae: Autoencoder providing the latent space
        x: One volume [S, C, H, W] with values in [0, 1]
        cfg: Target class, L1 weight, number of steps and step size

    Returns:
        Trace with ``cfg.steps + 1`` entries; entry 0 is the encoding of ``x``.
    """
    volume = _volume(x)
    with no_grad():
        z0 = np.array(ae.encode(Tensor(volume)).data, copy=True)
    n = z0.size
    threshold = abs(cfg.step_size) * cfg.alpha / n
    trace = CounterfactualTrace(target_class=cfg.target_class, alpha=cfg.alpha, step_size=cfg.step_size,
                                metadata=_model_flags(f, ae))
    z = z0.copy()
    target = None
    for step in range(cfg.steps + 1):
        latent = Tensor(z, requires_grad=True)
        image = _decode_volume(ae, latent)
        probs = softmax(f.logits(image), axis=-1)
        if target is None:
            target = np.zeros(probs.shape, dtype=probs.dtype)
            target[0, cfg.target_class] = 1.0
        ce = cross_entropy(probs, target)
        with no_grad():
            l1 = cfg.alpha * float(l1_distance(Tensor(z), z0).data) / n
        objective = float(ce.data) + l1
        if not np.isfinite(objective):
            raise NonFiniteError(f"counterfactual objective became non-finite at step {step}")
        trace.steps.append(TraceStep(step=step, latent=z.copy(), image=np.array(image.data[0], copy=True),
                                     probs=np.array(probs.data[0], copy=True), objective=objective,
                                     ce=float(ce.data), l1=l1))
        if step == cfg.steps:
            break
        backward(ce)
        gradient = latent.grad
        if not np.all(np.isfinite(gradient)):
            raise NonFiniteError(f"counterfactual gradient became non-finite at step {step}")
        moved = z - cfg.step_size * gradient
        offset = moved - z0
        z = (z0 + np.sign(offset) * np.maximum(np.abs(offset) - threshold, 0.0)).astype(z0.dtype)

    objectives = trace.objectives()
    trace.metadata["descent_achieved"] = bool(objectives[-1] <= objectives[0])
    if not trace.metadata["descent_achieved"]:
        logger.warning(f"Counterfactual search toward class {cfg.target_class} ended above its starting objective "
                       f"({objectives[-1]:.4f} > {objectives[0]:.4f})")
    return trace


def shift_grid(start: float = LATENT_SHIFT_START, count: int = LATENT_SHIFT_COUNT,
               sign: Literal["negative", "positive", "both"] = "negative") -> List[float]:
    """Doubling grid ``start * 2**k`` for k < count, ascending."""
    magnitudes = [start * 2.0 ** k for k in range(count)]
    if sign == "positive":
        return magnitudes
    negatives = [-m for m in reversed(magnitudes)]
    return negatives if sign == "negative" else negatives + magnitudes


def latent_shift(f: Classifier, ae: LatentCodec, x, lambda_grid: Sequence[float],
                 source_class: Optional[int] = None, target_class: int = 0) -> LatentShiftResult:
    """
    One-step counterfactuals ``D(z + lambda * dp_source/dz)`` over a grid of shifts.

    Args:
        source_class: Class whose probability gradient is followed; defaults to f's prediction on ``x``
        target_class: Class whose cross-entropy picks the best shift

    Returns:
        Curve of source-class probability and target loss per shift, with the best image
    """
    volume = _volume(x)
    _model_flags(f, ae)
    with no_grad():
        z0 = np.array(ae.encode(Tensor(volume)).data, copy=True)
        if source_class is None:
            source_class = int(np.argmax(f.logits(Tensor(volume[None])).data[0]))
    latent = Tensor(z0, requires_grad=True)
    probs = softmax(f.logits(_decode_volume(ae, latent)), axis=-1)
    backward(probs[0, source_class])
    gradient = latent.grad
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteError("latent shift gradient is non-finite")

    curve, images = [], []
    with no_grad():
        for shift in lambda_grid:
            shifted = (z0 + shift * gradient).astype(z0.dtype)
            image = _decode_volume(ae, Tensor(shifted))
            p = softmax(f.logits(image), axis=-1).data[0]
            loss = -float(np.log(max(float(p[target_class]), PROBABILITY_EPSILON)))
            curve.append(LatentShiftPoint(float(shift), float(p[source_class]), loss, np.array(p, copy=True)))
            images.append(np.array(image.data[0], copy=True))
    if not curve:
        raise ValueError("latent shift grid is empty")
    best = int(np.argmin([point.target_loss for point in curve]))
    return LatentShiftResult(source_class, target_class, curve, best, images[best])


def min_probability_curve(curve, class_index: Optional[int] = None) -> Tuple[float, int]:
    """
    Lowest probability of the source class along a trace or a latent-shift curve.

    Args:
        curve: CounterfactualTrace, LatentShiftResult or a plain sequence of probabilities
        class_index: Class to follow for a trace; defaults to the class predicted at step 0

    Returns:
        (minimum probability, index of the first step or shift reaching it)
    """
    if isinstance(curve, CounterfactualTrace):
        if not curve.steps:
            raise ValueError("trace is empty")
        index = int(np.argmax(curve.steps[0].probs)) if class_index is None else class_index
        values = curve.class_probabilities(index)
    elif isinstance(curve, LatentShiftResult):
        values = np.array([point.source_probability for point in curve.curve])
    else:
        values = np.asarray(curve, dtype=np.float64)
    if values.size == 0:
        raise ValueError("probability curve is empty")
    position = int(np.argmin(values))
    return float(values[position]), position


def difference_map(reference: np.ndarray, counterfactual: np.ndarray) -> np.ndarray:
    """|reference - counterfactual| reduced over channels and normalized per slice, [S, 1, H, W]."""
    diff = np.abs(reference.astype(np.float64) - counterfactual.astype(np.float64))
    return normalize_per_slice(channel_max(diff))


def counterfactual_targets(f: Classifier, x) -> Tuple[int, int]:
    """
    Negative and positive target classes for a volume.

    Two classes give (0, 1). With more, the negative target is class 0 and the
    positive target is f's most probable non-zero class.
    """
    with no_grad():
        logits = f.logits(Tensor(_volume(x)[None])).data[0]
    if logits.shape[0] == 2:
        return 0, 1
    return 0, 1 + int(np.argmax(logits[1:]))


def saliency_from_counterfactuals(f: Classifier, ae: LatentCodec, x, cfg: CounterfactualConfig,
                                  class_pair: Optional[Tuple[int, int]] = None,
                                  method: str = "counterfactual") -> Tuple[SaliencyMap, List[CounterfactualTrace]]:
    """
    Class-agnostic saliency: the mean of the normalized difference maps toward two classes.

    Args:
        f: Classifier
        ae: Autoencoder
        x: One volume [S, C, H, W]
        cfg: Search settings; ``cfg.target_class`` is ignored, ``cfg.reference`` picks
            the image the counterfactuals are compared with
        class_pair: Explicit targets; defaults to ``counterfactual_targets``

    Returns:
        (map, the two traces)
    """
    volume = _volume(x)
    pair = tuple(class_pair) if class_pair is not None else counterfactual_targets(f, volume)
    if cfg.reference == "reconstruction":
        with no_grad():
            reference = np.array(ae.decode(ae.encode(Tensor(volume))).data, copy=True)
    else:
        reference = volume
    traces, maps = [], []
    for target in pair:
        trace = optimize_counterfactual(f, ae, volume, cfg.model_copy(update={"target_class": int(target)}))
        traces.append(trace)
        maps.append(difference_map(reference, trace.counterfactual))
    values = (maps[0].astype(np.float64) + maps[1]) / 2.0
    metadata = {"descent_achieved": [t.metadata["descent_achieved"] for t in traces],
                "classifier_trained": traces[0].metadata["classifier_trained"],
                "autoencoder_trained": traces[0].metadata["autoencoder_trained"],
                "alpha": cfg.alpha, "steps": cfg.steps, "step_size": cfg.step_size, "reference": cfg.reference}
    source = getattr(f, "name", type(f).__name__)
    return SaliencyMap(values.astype(np.float32), method, source, pair, metadata), traces


def norec_config(cfg: CounterfactualConfig, step_size: float) -> CounterfactualConfig:
    """Unregularized search (alpha 0) with its own step, the variant without the proximity term."""
    return cfg.model_copy(update={"alpha": 0.0, "step_size": step_size})


def latent_shift_map(f: Classifier, ae: LatentCodec, x, lambda_grid: Sequence[float],
                     target_class: int = 0) -> Tuple[SaliencyMap, LatentShiftResult]:
    """Saliency from the best latent-shift counterfactual toward ``target_class``."""
    volume = _volume(x)
    result = latent_shift(f, ae, volume, lambda_grid, target_class=target_class)
    values = difference_map(volume, result.best_image)
    source = getattr(f, "name", type(f).__name__)
    return SaliencyMap(values, "latent_shift", source, target_class,
                       {"best_shift": result.best_shift, "source_class": result.source_class}), result
