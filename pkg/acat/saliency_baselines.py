"""
Gradient-based attribution baselines: input gradient, integrated gradients and Grad-CAM.

Class scores are logits. All maps are reduced over channels and min-max
normalized per slice.
"""

import logging
from typing import Optional

import numpy as np

from counterfactual import Classifier, SaliencyMap
from errors import ShapeError
from models.config_models import AttributionConfig
from tensor_core import Tensor, backward, no_grad, tensor_sum
from utils.map_utils import channel_max, normalize_per_slice, upsample_nearest_to

logger = logging.getLogger(__name__)


def _volume(x) -> np.ndarray:
    values = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    if values.ndim == 5 and values.shape[0] == 1:
        values = values[0]
    if values.ndim != 4:
        raise ValueError(f"expected one [S, C, H, W] volume, got {values.shape}")
    return values


def _source(f) -> str:
    return getattr(f, "name", type(f).__name__)


def _predicted_class(f: Classifier, volume: np.ndarray) -> int:
    with no_grad():
        return int(np.argmax(f.logits(Tensor(volume[None])).data[0]))


def input_gradient(f: Classifier, x, class_index: int) -> np.ndarray:
    """d logit[class] / d x for one volume, [S, C, H, W]."""
    variable = Tensor(_volume(x)[None], requires_grad=True)
    backward(f.logits(variable)[0, class_index])
    return variable.grad[0]


def gradient_map(f: Classifier, x, class_index: Optional[int] = None) -> SaliencyMap:
    volume = _volume(x)
    target = _predicted_class(f, volume) if class_index is None else class_index
    sensitivity = np.abs(input_gradient(f, volume, target))
    return SaliencyMap(normalize_per_slice(channel_max(sensitivity)), "gradient", _source(f), target)


def integrated_gradients(f: Classifier, x, class_index: int, steps: int = 32,
                         baseline: Optional[np.ndarray] = None, chunk: int = 16) -> np.ndarray:
    """
    Signed integrated gradients along the straight path from ``baseline`` to ``x``.

    Uses the midpoint rule: gradients at ``baseline + (k + 0.5) / steps * (x - baseline)``.

    Returns:
        (x - baseline) * mean path gradient, [S, C, H, W]
    """
    if steps < 1:
        raise ValueError(f"integrated gradients needs at least one step, got {steps}")
    volume = _volume(x).astype(np.float64)
    start = np.zeros_like(volume) if baseline is None else np.broadcast_to(
        np.asarray(baseline, dtype=np.float64), volume.shape)
    delta = volume - start
    alphas = (np.arange(steps) + 0.5) / steps
    total = np.zeros_like(volume)
    for begin in range(0, steps, chunk):
        part = alphas[begin:begin + chunk]
        path = (start[None] + part[:, None, None, None, None] * delta[None]).astype(np.float32)
        variable = Tensor(path, requires_grad=True)
        logits = f.logits(variable)
        backward(tensor_sum(logits[:, class_index]))
        total += variable.grad.sum(axis=0)
    return delta * total / steps


def integrated_gradients_map(f: Classifier, x, class_index: Optional[int] = None,
                             cfg: Optional[AttributionConfig] = None) -> SaliencyMap:
    cfg = cfg or AttributionConfig(method="integrated_gradients")
    volume = _volume(x)
    target = _predicted_class(f, volume) if class_index is None else class_index
    baseline = np.full(volume.shape, cfg.ig_baseline, dtype=np.float32)
    attribution = integrated_gradients(f, volume, target, cfg.ig_steps, baseline)
    values = normalize_per_slice(channel_max(np.abs(attribution)))
    return SaliencyMap(values, "integrated_gradients", _source(f), target, {"steps": cfg.ig_steps})


def _capture_index(f, layer: Optional[int]) -> int:
    layers = f.layers
    conv_indices = [i for i, spec in enumerate(layers) if spec.kind == "conv"]
    if layer is None:
        if not conv_indices:
            raise ShapeError("classifier has no conv layer for Grad-CAM")
        layer = conv_indices[-1]
    if layer < 0 or layer >= len(layers) or layers[layer].kind != "conv":
        kind = layers[layer].kind if 0 <= layer < len(layers) else "missing"
        raise ShapeError(f"Grad-CAM layer {layer} is not a conv layer ({kind})")
    following = layer + 1
    if following < len(layers) and layers[following].kind == "activation":
        return following
    return layer


def grad_cam_map(f: Classifier, x, class_index: Optional[int] = None, layer: Optional[int] = None) -> SaliencyMap:
    """
    Grad-CAM at a conv layer (default: the last one).

    Activations are the conv block's output, i.e. after the activation that
    directly follows the conv when there is one.
    """
    volume = _volume(x)
    target = _predicted_class(f, volume) if class_index is None else class_index
    capture = _capture_index(f, layer)
    captured = {}

    def observer(index, spec, out):
        if index == capture:
            captured["activations"] = out
        return out

    variable = Tensor(volume[None], requires_grad=True)
    backward(f.logits(variable, observer)[0, target])
    activations = captured["activations"]
    weights = activations.grad.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum(np.sum(weights * activations.data, axis=1, keepdims=True), 0.0)
    cam = upsample_nearest_to(cam, volume.shape[-2], volume.shape[-1])
    return SaliencyMap(normalize_per_slice(cam), "grad_cam", _source(f), target, {"layer": capture})


def attribution_map(f: Classifier, x, cfg: AttributionConfig) -> SaliencyMap:
    """Dispatch on ``cfg.method`` for the gradient-based methods."""
    if cfg.method == "gradient":
        return gradient_map(f, x, cfg.target_class)
    if cfg.method == "integrated_gradients":
        return integrated_gradients_map(f, x, cfg.target_class, cfg)
    if cfg.method == "grad_cam":
        return grad_cam_map(f, x, cfg.target_class, cfg.grad_cam_layer)
    raise ValueError(f"{cfg.method} is not a gradient attribution method")
