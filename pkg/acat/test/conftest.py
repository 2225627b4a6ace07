"""
Shared fixtures: tiny models, tiny datasets and a tiny run configuration.

Everything here is sized so that a full pipeline run finishes in seconds.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

ACAT_ROOT = Path(__file__).resolve().parents[1]
if str(ACAT_ROOT) not in sys.path:
    sys.path.insert(0, str(ACAT_ROOT))

from artifact_store import ArtifactStore  # noqa: E402
from models.config_models import DatasetSpec, LayerSpec, RunConfig, act, conv, pool  # noqa: E402
from nets import Autoencoder, build_classifier  # noqa: E402
from synth_data import generate_dataset  # noqa: E402
from tensor_core import Tensor, linear, reshape  # noqa: E402

IMAGE_SIZE = 16


def tiny_layers():
    """Three tapped convs; 16px slices end at 2x2, 32px slices at 4x4."""
    return [
        conv(4, "early"), act(), pool(),
        conv(4, "middle"), act(), pool(),
        conv(4, "late"), act(), pool(),
    ]


def tiny_encoder():
    return [conv(4, stride=2), act(), conv(4, stride=2), act()]


def tiny_decoder():
    return [
        LayerSpec(kind="upsample"), conv(4), act(),
        LayerSpec(kind="upsample"), conv(1), act("sigmoid"),
    ]


def tiny_run_payload(**overrides):
    """A run config dict small enough for end-to-end tests."""
    payload = {
        "seed": 3,
        "n_runs": 1,
        "dataset": {"n_samples": 20, "image_size": 32, "n_slices": 2,
                    "class_probs": [0.25, 0.35, 0.35, 0.05], "seed": 3},
        "classifier": {"layers": [spec.model_dump() for spec in tiny_layers()], "head": []},
        "autoencoder": {"encoder": [spec.model_dump() for spec in tiny_encoder()],
                        "decoder": [spec.model_dump() for spec in tiny_decoder()]},
        "baseline_training": {"epochs": 1, "batch_size": 4},
        "autoencoder_training": {"epochs": 1, "batch_size": 4},
        "counterfactual": {"steps": 2, "alpha": 10.0, "step_size": 1.0},
        "attribution": {"ig_steps": 2, "latent_shift_count": 4},
        "acat": {"attention_hidden": 4, "training": {"epochs": 1, "batch_size": 4}},
        "evaluation": {"saliency_methods": ["counterfactual", "gradient"], "max_eval_positives": 3},
    }
    payload.update(overrides)
    return payload




class LinearVolumeClassifier:
    """Logits linear in the flattened volume; smooth, so descent and attributions are predictable."""

    def __init__(self, shape, num_classes=3, seed=0, scale=0.05):
        rng = np.random.default_rng(seed)
        features = int(np.prod(shape))
        self.weight = Tensor(rng.uniform(-scale, scale, size=(num_classes, features)).astype(np.float32))
        self.bias = Tensor(np.zeros(num_classes, dtype=np.float32))
        self.name = "linear"
        self.trained = True

    def logits(self, images, observer=None):
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        return linear(reshape(x, (x.shape[0], -1)), self.weight, self.bias)


class IdentityCodec:
    """Latent space equal to image space."""
    trained = True

    def encode(self, x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))

    def decode(self, z):
        return z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(str(tmp_path / "store"))


@pytest.fixture
def toy_classifier():
    model = build_classifier(tiny_layers(), num_classes=4, image_size=(IMAGE_SIZE, IMAGE_SIZE), seed=7, head=[])
    return model.eval()


@pytest.fixture
def toy_autoencoder():
    return Autoencoder(tiny_encoder(), tiny_decoder(), image_size=(IMAGE_SIZE, IMAGE_SIZE), seed=11).eval()


@pytest.fixture
def toy_volume(rng):
    """One [S=2, C=1, 16, 16] volume with values in [0, 1]."""
    return rng.uniform(0.0, 1.0, size=(2, 1, IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)


@pytest.fixture
def toy_batch(rng):
    from nets import VolumeBatch
    images = rng.uniform(0.0, 1.0, size=(6, 2, 1, IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)
    labels = np.array([0, 1, 2, 3, 1, 2])
    maps = rng.uniform(0.0, 1.0, size=(6, 2, 1, IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)
    return VolumeBatch(images=images, labels=labels, saliency=maps)


@pytest.fixture(scope="session")
def tiny_spec():
    return DatasetSpec(n_samples=24, image_size=32, n_slices=2, class_probs=[0.25, 0.35, 0.35, 0.05], seed=5)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    return generate_dataset(tiny_spec)


@pytest.fixture
def tiny_run_config(tmp_path):
    payload = tiny_run_payload(output_dir=str(tmp_path / "run"))
    return RunConfig.model_validate(payload)
