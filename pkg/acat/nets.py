"""
Classifier and autoencoder graphs built from LayerSpec lists, plus training.

Volumes are [B, S, C, H, W]; every slice goes through the same feature stack
as a [B*S, C, H, W] batch and slice features are combined before the head.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from artifact_store import ArtifactStore
from errors import NonFiniteError, ShapeError
from models.config_models import AutoencoderConfig, ClassifierConfig, LayerSpec, TrainingConfig
from models.report_models import EpochRecord, TrainingLog
from optim import OptimizerState, optimizer_step
from serialization import read_checkpoint
from tensor_core import (
    Tensor,
    add,
    avg_pool2d,
    backward,
    conv2d,
    cross_entropy,
    dropout,
    leaky_relu,
    linear,
    max_pool2d,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    tensor_mean,
    upsample_nearest,
    zero_grad,
)

logger = logging.getLogger(__name__)

PARAMETERIZED_KINDS = ("conv", "linear", "residual")

# Called after every layer with (layer index, spec, output); returns the tensor passed on.
LayerObserver = Callable[[int, LayerSpec, Tensor], Tensor]


@dataclass
class VolumeBatch:
    """A batch of volumes with labels and optional ground truth and saliency maps."""
    images: np.ndarray
    labels: np.ndarray
    regions: Optional[List[Tuple[int, ...]]] = None
    masks: Optional[np.ndarray] = None
    tiers: Optional[np.ndarray] = None
    saliency: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 5:
            raise ShapeError(f"volume batch must be [B, S, C, H, W], got {self.images.shape}")
        if self.images.shape[1] < 1:
            raise ShapeError("volume batch has zero slices")
        if len(self.labels) != self.images.shape[0]:
            raise ShapeError(f"{len(self.labels)} labels for {self.images.shape[0]} volumes")
        if self.saliency is not None:
            self.saliency = np.asarray(self.saliency, dtype=np.float32)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, positions: Sequence[int]) -> "VolumeBatch":
        positions = np.asarray(positions, dtype=np.int64)

        def pick(value):
            if value is None:
                return None
            if isinstance(value, list):
                return [value[i] for i in positions]
            return value[positions]

        return VolumeBatch(
            images=self.images[positions],
            labels=self.labels[positions],
            regions=pick(self.regions),
            masks=pick(self.masks),
            tiers=pick(self.tiers),
            saliency=pick(self.saliency),
            indices=pick(self.indices),
        )

    def with_saliency(self, saliency: np.ndarray) -> "VolumeBatch":
        saliency = np.asarray(saliency, dtype=np.float32)
        expected = self.images.shape[:2] + (1,) + self.images.shape[3:]
        if saliency.shape != expected:
            raise ShapeError(f"saliency maps {saliency.shape} do not match volumes (expected {expected})")
        return replace(self, saliency=saliency)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    encoded = np.zeros((labels.size, num_classes), dtype=np.float32)
    encoded[np.arange(labels.size), labels] = 1.0
    return encoded


def activate(spec: LayerSpec, x: Tensor) -> Tensor:
    if spec.activation == "relu":
        return relu(x)
    if spec.activation == "sigmoid":
        return sigmoid(x)
    return leaky_relu(x, spec.slope)


class ModelGraph:
    """
    A feature stack followed by an optional classification head.

    Parameters are float32 tensors initialized uniformly in
    [-1/sqrt(fan_in), 1/sqrt(fan_in)] from the graph seed. With
    ``num_classes`` set, an output linear layer of that width is appended to
    the head; without it the graph is a pure feature extractor.
    """

    def __init__(self, layers: Sequence[LayerSpec], head: Optional[Sequence[LayerSpec]] = None,
                 in_channels: int = 1, image_size: Tuple[int, int] = (64, 64),
                 num_classes: Optional[int] = None, seed: int = 0, name: str = "classifier",
                 tap_dropout: float = 0.0):
        self.layers = [LayerSpec.model_validate(spec) for spec in layers]
        self.head = [LayerSpec.model_validate(spec) for spec in (head or [])]
        self.in_channels = in_channels
        self.image_size = (int(image_size[0]), int(image_size[1]))
        self.num_classes = num_classes
        self.seed = seed
        self.name = name
        if not 0.0 <= tap_dropout < 1.0:
            raise ValueError(f"tap dropout must lie in [0, 1), got {tap_dropout}")
        self.tap_dropout = tap_dropout
        self.training = False
        self.trained = False
        self.rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}
        self.shapes: List[Tuple[int, int, int]] = []
        self._check_taps()
        self._build(np.random.default_rng(seed))

    # Construction
    def _check_taps(self):
        labels = [spec.tap_label for spec in self.layers if spec.tap_label != "none"]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            raise ValueError(f"duplicate tap labels in {self.name}: {duplicates}")

    def _new_param(self, key: str, shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(fan_in)
        values = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        self.params[key] = Tensor(values, requires_grad=True, name=f"{self.name}.{key}")

    def _build(self, rng: np.random.Generator):
        c, h, w = self.in_channels, *self.image_size
        for i, spec in enumerate(self.layers):
            if spec.in_channels is not None and spec.in_channels != c:
                raise ShapeError(f"{self.name} layer {i} expects {spec.in_channels} input channels, receives {c}")
            k, p, s = spec.kernel, spec.resolved_padding, spec.stride
            if spec.kind == "conv":
                fan_in = c * k * k
                self._new_param(f"features.{i}.weight", (spec.channels, c, k, k), fan_in, rng)
                self._new_param(f"features.{i}.bias", (spec.channels,), fan_in, rng)
                c, h, w = spec.channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            elif spec.kind == "residual":
                if spec.channels is not None and spec.channels != c:
                    raise ShapeError(f"{self.name} residual layer {i} must keep {c} channels, got {spec.channels}")
                if 2 * p != k - 1 or s != 1:
                    raise ShapeError(f"{self.name} residual layer {i} must preserve spatial extent")
                for part in ("conv1", "conv2"):
                    self._new_param(f"features.{i}.{part}.weight", (c, c, k, k), c * k * k, rng)
                    self._new_param(f"features.{i}.{part}.bias", (c,), c * k * k, rng)
            elif spec.kind == "pool":
                if k > h or k > w:
                    raise ShapeError(f"{self.name} pool layer {i}: window {k} exceeds feature extent {h}x{w}")
                h, w = h // k, w // k
            elif spec.kind == "upsample":
                h, w = h * spec.factor, w * spec.factor
            elif spec.kind == "linear":
                raise ShapeError(f"{self.name} layer {i}: linear layers belong to the head")
            if h < 1 or w < 1:
                raise ShapeError(f"{self.name} layer {i} reduces the feature extent to {h}x{w}")
            self.shapes.append((c, h, w))
        self.feature_dim = c * h * w

        if self.num_classes is None:
            if self.head:
                raise ShapeError(f"{self.name}: head layers given without num_classes")
            return
        d = self.feature_dim
        for j, spec in enumerate(self.head):
            if spec.kind == "linear":
                self._new_param(f"head.{j}.weight", (spec.channels, d), d, rng)
                self._new_param(f"head.{j}.bias", (spec.channels,), d, rng)
                d = spec.channels
            elif spec.kind not in ("activation", "dropout"):
                raise ShapeError(f"{self.name} head layer {j}: '{spec.kind}' is not allowed in a head")
        self._new_param("head.out.weight", (self.num_classes, d), d, rng)
        self._new_param("head.out.bias", (self.num_classes,), d, rng)
        self.output_spec = LayerSpec(kind="linear", channels=self.num_classes)

    # Introspection
    @property
    def output_shape(self) -> Tuple[int, int, int]:
        return self.shapes[-1] if self.shapes else (self.in_channels, *self.image_size)

    def input_shape(self, index: int) -> Tuple[int, int, int]:
        return self.shapes[index - 1] if index > 0 else (self.in_channels, *self.image_size)

    @property
    def tap_indices(self) -> Dict[str, int]:
        return {spec.tap_label: i for i, spec in enumerate(self.layers) if spec.tap_label != "none"}

    @property
    def conv_indices(self) -> List[int]:
        return [i for i, spec in enumerate(self.layers) if spec.kind == "conv"]

    def parameters(self, upto: Optional[int] = None) -> List[Tensor]:
        if upto is None:
            return list(self.params.values())
        keep = []
        for key, param in self.params.items():
            parts = key.split(".")
            if parts[0] == "features" and int(parts[1]) <= upto:
                keep.append(param)
        return keep

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self.params.items())

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def reseed(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def freeze(self):
        """Stop recording gradients for the parameters (read-only sharing across threads)."""
        for param in self.params.values():
            param.requires_grad = False
        return self

    def unfreeze(self):
        for param in self.params.values():
            param.requires_grad = True
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {key: param.data.copy() for key, param in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        missing = [key for key in self.params if key not in state]
        if strict and missing:
            raise KeyError(f"{self.name}: state is missing {missing}")
        for key, param in self.params.items():
            if key not in state:
                continue
            value = np.asarray(state[key])
            if value.shape != param.shape:
                raise ShapeError(f"{self.name}.{key}: stored shape {value.shape} does not match {param.shape}")
            param.data = value.astype(param.dtype, copy=True)
            param.grad = None

    def architecture(self) -> Dict:
        return {
            "type": "classifier" if self.num_classes is not None else "feature_stack",
            "name": self.name,
            "layers": [spec.model_dump(mode="json") for spec in self.layers],
            "head": [spec.model_dump(mode="json") for spec in self.head],
            "in_channels": self.in_channels,
            "image_size": list(self.image_size),
            "num_classes": self.num_classes,
            "seed": self.seed,
            "tap_dropout": self.tap_dropout,
        }

    @classmethod
    def from_architecture(cls, arch: Dict) -> "ModelGraph":
        return cls(arch["layers"], head=arch.get("head"), in_channels=arch["in_channels"],
                   image_size=tuple(arch["image_size"]), num_classes=arch.get("num_classes"),
                   seed=arch["seed"], name=arch["name"], tap_dropout=arch.get("tap_dropout", 0.0))

    # Forward
    def apply_layer(self, index: int, spec: LayerSpec, x: Tensor) -> Tensor:
        prefix = f"features.{index}"
        if spec.kind == "conv":
            return conv2d(x, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"],
                          padding=spec.resolved_padding, stride=spec.stride)
        if spec.kind == "residual":
            p = spec.resolved_padding
            inner = conv2d(x, self.params[f"{prefix}.conv1.weight"], self.params[f"{prefix}.conv1.bias"], padding=p)
            inner = leaky_relu(inner, spec.slope)
            inner = conv2d(inner, self.params[f"{prefix}.conv2.weight"], self.params[f"{prefix}.conv2.bias"], padding=p)
            return add(x, inner)
        if spec.kind == "pool":
            return max_pool2d(x, spec.kernel) if spec.pool == "max" else avg_pool2d(x, spec.kernel)
        if spec.kind == "activation":
            return activate(spec, x)
        if spec.kind == "dropout":
            return dropout(x, spec.p, self.training, self.rng)
        if spec.kind == "upsample":
            return upsample_nearest(x, spec.factor)
        raise ShapeError(f"{self.name}: cannot apply '{spec.kind}' inside the feature stack")

    def features(self, x: Tensor, observer: Optional[LayerObserver] = None, upto: Optional[int] = None) -> Tensor:
        """Run the feature stack on [N, C, H, W] images, stopping after layer ``upto`` if given."""
        for i, spec in enumerate(self.layers):
            x = self.apply_layer(i, spec, x)
            if observer is not None:
                x = observer(i, spec, x)
            if spec.tap_label != "none" and self.tap_dropout > 0:
                x = dropout(x, self.tap_dropout, self.training, self.rng)
            if upto is not None and i >= upto:
                break
        return x

    def head_logits(self, x: Tensor, observer: Optional[LayerObserver] = None) -> Tensor:
        """Map combined [B, D] features to [B, K] logits."""
        if self.num_classes is None:
            raise ShapeError(f"{self.name} has no classification head")
        offset = len(self.layers)
        for j, spec in enumerate(self.head):
            if spec.kind == "linear":
                x = linear(x, self.params[f"head.{j}.weight"], self.params[f"head.{j}.bias"])
            elif spec.kind == "activation":
                x = activate(spec, x)
            else:
                x = dropout(x, spec.p, self.training, self.rng)
            if observer is not None:
                x = observer(offset + j, spec, x)
        x = linear(x, self.params["head.out.weight"], self.params["head.out.bias"])
        if observer is not None:
            x = observer(offset + len(self.head), self.output_spec, x)
        return x

    def as_volume(self, images: Union[Tensor, np.ndarray]) -> Tensor:
        volume = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        if volume.ndim == 4:
            volume = reshape(volume, (1,) + volume.shape)
        if volume.ndim != 5:
            raise ShapeError(f"{self.name}: expected [B, S, C, H, W] volumes, got {volume.shape}")
        if volume.shape[1] == 0:
            raise ShapeError(f"{self.name}: volume has zero slices")
        expected = (self.in_channels, *self.image_size)
        if tuple(volume.shape[2:]) != expected:
            raise ShapeError(f"{self.name}: slice shape {tuple(volume.shape[2:])} does not match {expected}")
        return volume

    def slice_features(self, volume: Tensor, observer: Optional[LayerObserver] = None) -> Tensor:
        """Feature stack on every slice; returns [B, S, D]."""
        b, s = volume.shape[:2]
        flat = reshape(volume, (b * s,) + volume.shape[2:])
        feats = self.features(flat, observer)
        return reshape(feats, (b, s, -1))

    def combine(self, per_slice: Tensor) -> Tensor:
        return tensor_mean(per_slice, axis=1)

    def logits(self, images: Union[Tensor, np.ndarray], observer: Optional[LayerObserver] = None) -> Tensor:
        volume = self.as_volume(images)
        return self.head_logits(self.combine(self.slice_features(volume, observer)), observer)

    def probabilities(self, images: Union[Tensor, np.ndarray]) -> Tensor:
        return softmax(self.logits(images), axis=-1)

    def batch_logits(self, batch: VolumeBatch, observer: Optional[LayerObserver] = None) -> Tensor:
        return self.logits(batch.images, observer)


def build_classifier(layers: Sequence[LayerSpec], num_classes: int, image_size: Tuple[int, int] = (64, 64),
                     seed: int = 0, head: Optional[Sequence[LayerSpec]] = None, in_channels: int = 1,
                     name: str = "classifier", tap_dropout: float = 0.0) -> ModelGraph:
    """Build a seeded classifier; duplicate tap labels raise ValueError."""
    model = ModelGraph(layers, head=head, in_channels=in_channels, image_size=image_size,
                       num_classes=num_classes, seed=seed, name=name, tap_dropout=tap_dropout)
    logger.info(f"Built {name}: {len(model.layers)} feature layers, {len(model.tap_indices)} taps, "
                f"{sum(p.size for p in model.parameters())} parameters")
    return model


def classifier_from_config(config: ClassifierConfig, image_size: int, seed: int,
                           name: str = "classifier", tap_dropout: float = 0.0) -> ModelGraph:
    return build_classifier(config.layers, config.num_classes, (image_size, image_size), seed,
                            head=config.head, in_channels=config.in_channels, name=name, tap_dropout=tap_dropout)


def forward_classifier(model: ModelGraph, batch: VolumeBatch, taps_out: bool = False):
    """
    Class probabilities for a batch, optionally with the tapped features.

    Returns:
        probs [B, K], or (probs, {label: [B, S, C, h, w]}) when ``taps_out``
    """
    taps: Dict[str, Tensor] = {}
    b, s = batch.images.shape[:2]

    def observer(index, spec, out):
        if spec.tap_label != "none":
            taps[spec.tap_label] = reshape(out, (b, s) + out.shape[1:])
        return out

    probs = softmax(model.logits(batch.images, observer if taps_out else None), axis=-1)
    return (probs, taps) if taps_out else probs


class Autoencoder:
    """Convolutional encoder/decoder pair; decoder output is squashed to [0, 1]."""

    def __init__(self, encoder_layers: Sequence[LayerSpec], decoder_layers: Sequence[LayerSpec],
                 in_channels: int = 1, image_size: Tuple[int, int] = (64, 64), seed: int = 0,
                 name: str = "autoencoder"):
        encoder_seed, decoder_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
        self.seed = seed
        self.name = name
        self.encoder = ModelGraph(encoder_layers, in_channels=in_channels, image_size=image_size,
                                  seed=encoder_seed, name=f"{name}.encoder")
        self.latent_shape = self.encoder.output_shape
        decoder_layers = [LayerSpec.model_validate(spec) for spec in decoder_layers]
        if not decoder_layers or decoder_layers[-1].kind != "activation" or decoder_layers[-1].activation != "sigmoid":
            decoder_layers.append(LayerSpec(kind="activation", activation="sigmoid"))
        self.decoder = ModelGraph(decoder_layers, in_channels=self.latent_shape[0],
                                  image_size=self.latent_shape[1:], seed=decoder_seed, name=f"{name}.decoder")
        self.image_shape = (in_channels, int(image_size[0]), int(image_size[1]))
        if self.decoder.output_shape != self.image_shape:
            raise ShapeError(f"decoder output {self.decoder.output_shape} does not match images {self.image_shape}")
        self.trained = False

    def _images(self, x: Union[Tensor, np.ndarray], expected: Tuple[int, ...], what: str):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim < 3 or tuple(x.shape[-3:]) != tuple(expected):
            raise ShapeError(f"{self.name}: {what} trailing shape {x.shape[-3:]} does not match {tuple(expected)}")
        lead = x.shape[:-3]
        flat = reshape(x, (int(np.prod(lead)) if lead else 1,) + tuple(expected))
        return flat, lead

    def encode(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        flat, lead = self._images(x, self.image_shape, "image")
        z = self.encoder.features(flat)
        return reshape(z, lead + self.latent_shape)

    def decode(self, z: Union[Tensor, np.ndarray]) -> Tensor:
        flat, lead = self._images(z, self.latent_shape, "latent")
        x = self.decoder.features(flat)
        return reshape(x, lead + self.image_shape)

    def reconstruct(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        return self.decode(self.encode(x))

    def parameters(self) -> List[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()

    def train(self):
        self.encoder.train()
        self.decoder.train()
        return self

    def eval(self):
        self.encoder.eval()
        self.decoder.eval()
        return self

    @property
    def training(self) -> bool:
        return self.encoder.training

    def reseed(self, seed: int):
        self.encoder.reseed(seed)
        self.decoder.reseed(seed + 1)

    def freeze(self):
        self.encoder.freeze()
        self.decoder.freeze()
        return self

    def unfreeze(self):
        self.encoder.unfreeze()
        self.decoder.unfreeze()
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        state.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        self.encoder.load_state_dict({k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")})
        self.decoder.load_state_dict({k[len("decoder."):]: v for k, v in state.items() if k.startswith("decoder.")})

    def architecture(self) -> Dict:
        return {
            "type": "autoencoder",
            "name": self.name,
            "encoder": [spec.model_dump(mode="json") for spec in self.encoder.layers],
            "decoder": [spec.model_dump(mode="json") for spec in self.decoder.layers],
            "in_channels": self.image_shape[0],
            "image_size": list(self.image_shape[1:]),
            "seed": self.seed,
        }

    @classmethod
    def from_architecture(cls, arch: Dict) -> "Autoencoder":
        return cls(arch["encoder"], arch["decoder"], in_channels=arch["in_channels"],
                   image_size=tuple(arch["image_size"]), seed=arch["seed"], name=arch["name"])


def build_autoencoder(config: AutoencoderConfig, image_size: int, seed: int) -> Autoencoder:
    ae = Autoencoder(config.encoder, config.decoder, in_channels=config.in_channels,
                     image_size=(image_size, image_size), seed=seed)
    logger.info(f"Built autoencoder with latent shape {ae.latent_shape}")
    return ae


def encode(ae: Autoencoder, x: Union[Tensor, np.ndarray]) -> Tensor:
    return ae.encode(x)


def decode(ae: Autoencoder, z: Union[Tensor, np.ndarray]) -> Tensor:
    return ae.decode(z)


def load_model(store: ArtifactStore, directory: str):
    """Rebuild a ModelGraph or Autoencoder from a checkpoint directory."""
    manifest, tensors = read_checkpoint(store, directory)
    arch = manifest["architecture"]
    if arch["type"] == "autoencoder":
        model = Autoencoder.from_architecture(arch)
    elif arch["type"] in ("classifier", "feature_stack"):
        model = ModelGraph.from_architecture(arch)
    else:
        raise ValueError(f"checkpoint at {directory} holds a '{arch['type']}' model")
    model.load_state_dict(tensors)
    model.trained = bool(manifest.get("trained", False))
    return model.eval()


def _batches(order: np.ndarray, batch_size: int) -> Iterable[np.ndarray]:
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def train_model(model, data: VolumeBatch, epochs: int, seed: int, loss_spec: str = "cross_entropy",
                training: Optional[TrainingConfig] = None, model_name: Optional[str] = None) -> TrainingLog:
    """
    Train a classifier (``cross_entropy``) or autoencoder (``reconstruction``).

    Args:
        model: ModelGraph, AcatModel or Autoencoder
        data: Training volumes (with saliency maps for an AcatModel)
        epochs: Number of passes over the (optionally capped) training set
        seed: Seeds the shuffling order and dropout masks
        loss_spec: ``cross_entropy`` or ``reconstruction`` (mean squared error)
        training: Batch size, optimizer and sample cap

    Returns:
        Per-epoch loss and accuracy; the model is left in eval mode.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if loss_spec not in ("cross_entropy", "reconstruction"):
        raise ValueError(f"Unknown loss: {loss_spec}")
    training = training or TrainingConfig(epochs=epochs)
    name = model_name or getattr(model, "name", type(model).__name__)
    log = TrainingLog(model_name=name, loss=loss_spec, seed=seed)
    if epochs == 0:
        model.eval()
        return log

    rng = np.random.default_rng(seed)
    model.reseed(seed)
    model.unfreeze()
    params = model.parameters()
    opt = training.optimizer
    state = OptimizerState(rule=opt.rule, learning_rate=opt.learning_rate,
                           momentum=opt.momentum if opt.rule == "sgd" else 0.0,
                           beta1=opt.beta1, beta2=opt.beta2)
    num_classes = getattr(model, "num_classes", None)
    targets = one_hot(data.labels, num_classes) if loss_spec == "cross_entropy" else None

    model.train()
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        if training.max_train_samples:
            order = order[:training.max_train_samples]
        total, correct, seen = 0.0, 0, 0
        for index, positions in enumerate(_batches(order, training.batch_size)):
            batch = data.subset(positions)
            zero_grad(params)
            try:
                if loss_spec == "cross_entropy":
                    probs = softmax(model.batch_logits(batch), axis=-1)
                    loss = cross_entropy(probs, targets[positions])
                    correct += int(np.sum(np.argmax(probs.data, axis=-1) == batch.labels))
                else:
                    residual = model.reconstruct(batch.images) - Tensor(batch.images)
                    loss = tensor_mean(residual * residual)
                backward(loss)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{name}: non-finite loss in epoch {epoch}, batch {index}: {exc}") from exc
            optimizer_step(state, params)
            total += float(loss.data) * len(positions)
            seen += len(positions)
        record = EpochRecord(epoch=epoch, loss=total / seen,
                             accuracy=correct / seen if loss_spec == "cross_entropy" else None)
        log.epochs.append(record)
        accuracy = f", accuracy {record.accuracy:.3f}" if record.accuracy is not None else ""
        logger.info(f"📈 {name} epoch {epoch + 1}/{epochs}: loss {record.loss:.4f}{accuracy}")

    model.eval()
    model.trained = True
    return log


def collect_preactivations(model, batch: VolumeBatch) -> List[Tensor]:
    """Outputs of every parameterized layer before its activation (and before any attention modulation)."""
    records: List[Tensor] = []

    def observer(index, spec, out):
        if spec.kind in PARAMETERIZED_KINDS:
            records.append(out.detach())
        return out

    with no_grad():
        model.batch_logits(batch, observer=observer)
    return records
