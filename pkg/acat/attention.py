"""
Saliency-guided attention: tap masks, feature modulation, mask fusion and
slice attention, assembled into AcatModel.

A saliency branch with the classifier's feature stack reads the saliency
maps. At each enabled tap its features are reduced by a channel max, a 3x3
convolution and a sigmoid to a single-channel mask M, and the image-branch
features F at the same layer become F + F * M. The enabled masks are also
pooled to the final feature extent and fused by a 1x1 convolution into one
mask applied to the final features before the head.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from artifact_store import ArtifactStore
from config import DEFAULT_LEAKY_SLOPE
from errors import ShapeError
from models.config_models import TAP_ORDER, AcatConfig, LayerSpec
from nets import LayerObserver, ModelGraph, VolumeBatch
from serialization import read_checkpoint
from tensor_core import (
    Tensor,
    add,
    avg_pool2d,
    broadcast_hadamard,
    channel_max_pool,
    concat,
    conv2d,
    dropout,
    leaky_relu,
    linear,
    reshape,
    sigmoid,
    softmax,
    tensor_sum,
)

logger = logging.getLogger(__name__)

FUSED = "fused"


@dataclass
class AttentionTap:
    label: str
    layer_index: int
    extent: Tuple[int, int]
    weight: Tensor
    bias: Tensor


@dataclass
class FusionLayer:
    labels: Tuple[str, ...]
    extent: Tuple[int, int]
    weight: Tensor
    bias: Tensor


@dataclass
class SliceAttention:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    p: float = 0.1
    slope: float = DEFAULT_LEAKY_SLOPE


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True, name=name)


def new_tap(label: str, layer_index: int, extent: Tuple[int, int], seed: int, prefix: str = "acat") -> AttentionTap:
    rng = np.random.default_rng(seed)
    return AttentionTap(label, layer_index, tuple(extent),
                        _uniform(rng, (1, 1, 3, 3), 9, f"{prefix}.taps.{label}.weight"),
                        _uniform(rng, (1,), 9, f"{prefix}.taps.{label}.bias"))


def new_fusion(labels: Sequence[str], extent: Tuple[int, int], seed: int, prefix: str = "acat") -> FusionLayer:
    rng = np.random.default_rng(seed)
    n = len(labels)
    return FusionLayer(tuple(labels), tuple(extent),
                       _uniform(rng, (1, n, 1, 1), n, f"{prefix}.fusion.weight"),
                       _uniform(rng, (1,), n, f"{prefix}.fusion.bias"))


def new_slice_attention(feature_dim: int, hidden: int, p: float, seed: int, prefix: str = "acat") -> SliceAttention:
    rng = np.random.default_rng(seed)
    return SliceAttention(_uniform(rng, (hidden, feature_dim), feature_dim, f"{prefix}.slices.w1"),
                          _uniform(rng, (hidden,), feature_dim, f"{prefix}.slices.b1"),
                          _uniform(rng, (1, hidden), hidden, f"{prefix}.slices.w2"),
                          _uniform(rng, (1,), hidden, f"{prefix}.slices.b2"),
                          p=p)


def spatial_attention_mask(tap: AttentionTap, saliency_features: Tensor) -> Tensor:
    """
    Soft spatial mask from saliency-branch features.

    Args:
        tap: Mask convolution and expected extent
        saliency_features: [C, H, W] or [N, C, H, W]

    Returns:
        sigmoid(conv3x3(channel_max(features))) with one channel and the same extent
    """
    if tuple(saliency_features.shape[-2:]) != tuple(tap.extent):
        raise ShapeError(f"tap '{tap.label}': saliency features have extent {saliency_features.shape[-2:]}, "
                         f"expected {tap.extent}")
    return sigmoid(conv2d(channel_max_pool(saliency_features), tap.weight, tap.bias, padding=1))


def modulate(features: Tensor, mask: Tensor) -> Tensor:
    """F + F * mask, the mask shared across channels."""
    return add(features, broadcast_hadamard(features, mask))


def fuse_masks(fusion: FusionLayer, masks: Sequence[Tensor]) -> Tensor:
    """Average-pool each mask to the fusion extent, stack them as channels, then 1x1 conv and sigmoid."""
    if len(masks) != fusion.weight.shape[1]:
        raise ShapeError(f"fusion expects {fusion.weight.shape[1]} masks, got {len(masks)}")
    target_h, target_w = fusion.extent
    pooled = []
    for mask in masks:
        h, w = mask.shape[-2:]
        if (h, w) != (target_h, target_w):
            mask = avg_pool2d(mask, (h // target_h, w // target_w))
            if tuple(mask.shape[-2:]) != (target_h, target_w):
                raise ShapeError(f"mask extent {h}x{w} cannot be pooled to {target_h}x{target_w}")
        pooled.append(mask)
    stacked = concat(pooled, axis=-3)
    return sigmoid(conv2d(stacked, fusion.weight, fusion.bias))


def slice_attention(mlp: SliceAttention, slice_features: Tensor, training: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
    """
    Weight slices with sigmoid(MLP(f_s)) and return their normalized weighted mean.

    Args:
        mlp: Slice attention parameters
        slice_features: [S, D] or [B, S, D]
        training: Enables the hidden-layer dropout

    Returns:
        (weights [S] or [B, S], combined [D] or [B, D])
    """
    unbatched = slice_features.ndim == 2
    x = reshape(slice_features, (1,) + slice_features.shape) if unbatched else slice_features
    if x.shape[1] < 1:
        raise ShapeError("slice attention needs at least one slice")
    hidden = leaky_relu(linear(x, mlp.w1, mlp.b1), mlp.slope)
    hidden = dropout(hidden, mlp.p, training, rng if rng is not None else np.random.default_rng(0))
    weights = sigmoid(linear(hidden, mlp.w2, mlp.b2))
    combined = tensor_sum(weights * x, axis=1) / tensor_sum(weights, axis=1)
    weights = reshape(weights, x.shape[:2])
    if unbatched:
        return reshape(weights, weights.shape[1:]), reshape(combined, combined.shape[1:])
    return weights, combined


class AcatModel:
    """
    Image branch and saliency branch joined by attention taps.

    Only components that take part in the forward pass are created: taps for
    enabled labels, a fusion layer over those taps when fusion is enabled, and
    the slice-attention MLP when slices are combined by attention. Each
    component draws its initial weights from its own seed, so models differing
    only in flags share the weights of their common parts.
    """

    def __init__(self, image: ModelGraph, saliency: ModelGraph, taps: Dict[str, AttentionTap],
                 fusion: Optional[FusionLayer], slice_mlp: Optional[SliceAttention],
                 flags: Dict[str, bool], seed: int = 0, name: str = "acat"):
        if image.num_classes is None:
            raise ShapeError("image branch needs a classification head")
        self.image = image
        self.saliency = saliency
        self.taps = taps
        self.fusion = fusion
        self.slice_mlp = slice_mlp
        self.flags = dict(flags)
        self.seed = seed
        self.name = name
        self.training = False
        self.trained = False
        self.rng = np.random.default_rng(seed)
        self._labels_by_index = {tap.layer_index: label for label, tap in taps.items()}

    @property
    def num_classes(self) -> int:
        return self.image.num_classes

    @property
    def layers(self) -> List[LayerSpec]:
        return self.image.layers

    # Parameters and modes
    def _component_params(self) -> List[Tuple[str, Tensor]]:
        named = []
        for label in TAP_ORDER:
            if label in self.taps:
                named += [(f"taps.{label}.weight", self.taps[label].weight), (f"taps.{label}.bias", self.taps[label].bias)]
        if self.fusion is not None:
            named += [("fusion.weight", self.fusion.weight), ("fusion.bias", self.fusion.bias)]
        if self.slice_mlp is not None:
            m = self.slice_mlp
            named += [("slices.w1", m.w1), ("slices.b1", m.b1), ("slices.w2", m.w2), ("slices.b2", m.b2)]
        return named

    def parameters(self) -> List[Tensor]:
        params = self.image.parameters()
        if self.taps:
            params += self.saliency.parameters(upto=max(t.layer_index for t in self.taps.values()))
        return params + [param for _, param in self._component_params()]

    def train(self):
        self.training = True
        self.image.train()
        self.saliency.train()
        return self

    def eval(self):
        self.training = False
        self.image.eval()
        self.saliency.eval()
        return self

    def reseed(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.image.reseed(seed + 1)
        self.saliency.reseed(seed + 2)

    def freeze(self):
        self.image.freeze()
        self.saliency.freeze()
        for _, param in self._component_params():
            param.requires_grad = False
        return self

    def unfreeze(self):
        self.image.unfreeze()
        self.saliency.unfreeze()
        for _, param in self._component_params():
            param.requires_grad = True
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"image.{k}": v for k, v in self.image.state_dict().items()}
        state.update({f"saliency.{k}": v for k, v in self.saliency.state_dict().items()})
        state.update({key: param.data.copy() for key, param in self._component_params()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        self.image.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("image.")})
        self.saliency.load_state_dict({k[9:]: v for k, v in state.items() if k.startswith("saliency.")})
        for key, param in self._component_params():
            if key not in state:
                raise KeyError(f"{self.name}: state is missing {key}")
            value = np.asarray(state[key])
            if value.shape != param.shape:
                raise ShapeError(f"{self.name}.{key}: stored shape {value.shape} does not match {param.shape}")
            param.data = value.astype(param.dtype, copy=True)

    def architecture(self) -> Dict:
        return {
            "type": "acat",
            "name": self.name,
            "seed": self.seed,
            "image": self.image.architecture(),
            "saliency": self.saliency.architecture(),
            "flags": self.flags,
            "attention_hidden": int(self.slice_mlp.w1.shape[0]) if self.slice_mlp else None,
            "attention_dropout": self.slice_mlp.p if self.slice_mlp else None,
        }

    @classmethod
    def from_architecture(cls, arch: Dict) -> "AcatModel":
        image = ModelGraph.from_architecture(arch["image"])
        saliency = ModelGraph.from_architecture(arch["saliency"])
        flags = arch["flags"]
        config = AcatConfig(
            use_early=flags["use_early"], use_middle=flags["use_middle"], use_late=flags["use_late"],
            use_fusion=flags["use_fusion"], slice_combine=flags["slice_combine"],
            attention_hidden=arch["attention_hidden"] or 16, attention_dropout=arch["attention_dropout"] or 0.0,
            init_from_baseline=False)
        return assemble_acat_model(image, saliency, config, arch["seed"], name=arch["name"])

    # Forward
    def _saliency_volume(self, saliency, volume_shape) -> Tensor:
        if saliency is None:
            raise ValueError(f"{self.name}: missing saliency map for the batch")
        values = saliency.detach() if isinstance(saliency, Tensor) else Tensor(np.asarray(saliency, dtype=np.float32))
        if values.ndim == 4:
            values = reshape(values, (1,) + values.shape)
        expected = tuple(volume_shape[:2]) + (1,) + tuple(volume_shape[3:])
        if tuple(values.shape) != expected:
            raise ShapeError(f"{self.name}: saliency maps {values.shape} do not match volumes (expected {expected})")
        return values

    def _constant_mask(self, like: Tensor, value: float) -> Tensor:
        return Tensor(np.full((like.shape[0], 1) + like.shape[2:], value, dtype=like.dtype))

    def logits(self, images, saliency, observer: Optional[LayerObserver] = None,
               mask_overrides: Optional[Dict[str, float]] = None,
               masks_out: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """
        Class logits for volumes given their saliency maps.

        Args:
            images: [B, S, C, H, W] volumes
            saliency: [B, S, 1, H, W] maps; never differentiated
            observer: Sees each image-branch layer output before modulation
            mask_overrides: Constant values replacing tap masks by label (or 'fused')
            masks_out: Receives every emitted mask by label
        """
        volume = self.image.as_volume(images)
        maps = self._saliency_volume(saliency, volume.shape)
        b, s = volume.shape[:2]
        overrides = mask_overrides or {}

        saliency_features: Dict[str, Tensor] = {}
        if self.taps:
            def record(index, spec, out):
                label = self._labels_by_index.get(index)
                if label is not None:
                    saliency_features[label] = out
                return out

            last = max(tap.layer_index for tap in self.taps.values())
            self.saliency.features(reshape(maps, (b * s,) + maps.shape[2:]), record, upto=last)

        emitted: Dict[str, Tensor] = {}

        def attend(index, spec, out):
            if observer is not None:
                out = observer(index, spec, out)
            label = self._labels_by_index.get(index)
            if label is None:
                return out
            if label in overrides:
                mask = self._constant_mask(out, overrides[label])
            else:
                mask = spatial_attention_mask(self.taps[label], saliency_features[label])
            emitted[label] = mask
            return modulate(out, mask)

        features = self.image.features(reshape(volume, (b * s,) + volume.shape[2:]), attend)
        if self.fusion is not None:
            if FUSED in overrides:
                fused = self._constant_mask(features, overrides[FUSED])
            else:
                fused = fuse_masks(self.fusion, [emitted[label] for label in self.fusion.labels])
            emitted[FUSED] = fused
            features = broadcast_hadamard(features, fused)
        per_slice = reshape(features, (b, s, -1))
        if self.slice_mlp is not None:
            _, combined = slice_attention(self.slice_mlp, per_slice, self.training, self.rng)
        else:
            combined = self.image.combine(per_slice)
        if masks_out is not None:
            masks_out.update(emitted)
        return self.image.head_logits(combined, observer)

    def probabilities(self, images, saliency) -> Tensor:
        return softmax(self.logits(images, saliency), axis=-1)

    def batch_logits(self, batch: VolumeBatch, observer: Optional[LayerObserver] = None) -> Tensor:
        return self.logits(batch.images, batch.saliency, observer)

    def bind(self, saliency) -> "BoundAcatClassifier":
        return BoundAcatClassifier(self, saliency)


class BoundAcatClassifier:
    """An AcatModel with fixed saliency maps, usable wherever a plain classifier is expected."""

    def __init__(self, model: AcatModel, saliency):
        self.model = model
        self.saliency = np.asarray(saliency.data if isinstance(saliency, Tensor) else saliency, dtype=np.float32)
        self.name = f"{model.name}-bound"

    @property
    def trained(self) -> bool:
        return self.model.trained

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    @property
    def layers(self) -> List[LayerSpec]:
        return self.model.layers

    def logits(self, images, observer: Optional[LayerObserver] = None) -> Tensor:
        volume = self.model.image.as_volume(images)
        maps = self.saliency if self.saliency.ndim == 5 else self.saliency[None]
        if maps.shape[0] == 1 and volume.shape[0] > 1:
            maps = np.repeat(maps, volume.shape[0], axis=0)
        return self.model.logits(volume, maps, observer)

    def probabilities(self, images) -> Tensor:
        return softmax(self.logits(images), axis=-1)


def _component_seeds(seed: int) -> Dict[str, int]:
    names = ("image", "saliency") + TAP_ORDER + (FUSED, "slices")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(names, children)}


def assemble_acat_model(image: ModelGraph, saliency: ModelGraph, config: AcatConfig, seed: int,
                        name: str = "acat") -> AcatModel:
    seeds = _component_seeds(seed)
    requested = [label for label in TAP_ORDER if getattr(config, f"use_{label}")]
    missing = [label for label in requested if label not in image.tap_indices]
    if missing:
        raise ValueError(f"enabled taps {missing} are not marked in the classifier layers")
    taps = {}
    for label in requested:
        index = image.tap_indices[label]
        taps[label] = new_tap(label, index, image.shapes[index][1:], seeds[label], prefix=name)
    fusion = None
    if config.use_fusion and taps:
        fusion = new_fusion(list(taps), image.output_shape[1:], seeds[FUSED], prefix=name)
    slice_mlp = None
    if config.slice_combine == "attention":
        slice_mlp = new_slice_attention(image.feature_dim, config.attention_hidden, config.attention_dropout,
                                        seeds["slices"], prefix=name)
    flags = {"use_early": config.use_early, "use_middle": config.use_middle, "use_late": config.use_late,
             "use_fusion": config.use_fusion, "slice_combine": config.slice_combine}
    return AcatModel(image, saliency, taps, fusion, slice_mlp, flags, seed=seed, name=name)


def build_acat_model(classifier: ModelGraph, config: AcatConfig, seed: int, name: str = "acat") -> AcatModel:
    """
    Build an AcatModel whose branches mirror ``classifier``'s feature stack.

    With ``config.init_from_baseline`` the image branch starts from the
    classifier's weights; otherwise it is freshly initialized.
    """
    arch = classifier.architecture()
    seeds = _component_seeds(seed)
    image = ModelGraph(arch["layers"], head=arch["head"], in_channels=arch["in_channels"],
                       image_size=tuple(arch["image_size"]), num_classes=arch["num_classes"],
                       seed=seeds["image"], name=f"{name}.image")
    if config.init_from_baseline:
        image.load_state_dict(classifier.state_dict())
    saliency = ModelGraph(arch["layers"], in_channels=1, image_size=tuple(arch["image_size"]),
                          seed=seeds["saliency"], name=f"{name}.saliency")
    model = assemble_acat_model(image, saliency, config, seed, name=name)
    logger.info(f"Built {name}: taps {list(model.taps)}, fusion {'on' if model.fusion else 'off'}, "
                f"slice combine {config.slice_combine}")
    return model


def acat_forward(model: AcatModel, batch: VolumeBatch, saliency=None) -> Tensor:
    """Class probabilities of an AcatModel; maps default to ``batch.saliency``."""
    maps = batch.saliency if saliency is None else saliency
    if isinstance(maps, (list, tuple)):
        maps = np.stack([getattr(m, "values", m) for m in maps])
    return softmax(model.logits(batch.images, maps), axis=-1)


def load_acat_model(store: ArtifactStore, directory: str) -> AcatModel:
    manifest, tensors = read_checkpoint(store, directory)
    if manifest["architecture"]["type"] != "acat":
        raise ValueError(f"checkpoint at {directory} is not an ACAT model")
    model = AcatModel.from_architecture(manifest["architecture"])
    model.load_state_dict(tensors)
    model.trained = bool(manifest.get("trained", False))
    return model.eval()


def dropout_control_model(classifier: ModelGraph, p: float, seed: int) -> ModelGraph:
    """A copy of ``classifier`` that applies dropout with probability ``p`` at its tap layers."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout control p must lie in [0, 1), got {p}")
    arch = dict(classifier.architecture(), tap_dropout=p, name=f"{classifier.name}-dropout")
    model = ModelGraph.from_architecture(arch)
    model.load_state_dict(classifier.state_dict())
    model.reseed(seed)
    return model
