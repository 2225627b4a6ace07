"""
Unit tests for classifier and autoencoder graphs and the training loop.
"""

import numpy as np
import pytest

from errors import ShapeError
from models.config_models import LayerSpec, OptimizerConfig, TrainingConfig, act, conv, pool
from nets import (
    Autoencoder,
    VolumeBatch,
    build_classifier,
    collect_preactivations,
    forward_classifier,
    one_hot,
    train_model,
)
from tensor_core import Tensor, no_grad

from conftest import IMAGE_SIZE, tiny_decoder, tiny_encoder, tiny_layers


class TestVolumeBatch:
    def test_requires_five_dimensions(self):
        with pytest.raises(ShapeError):
            VolumeBatch(images=np.zeros((2, 1, 8, 8)), labels=[0, 1])

    def test_label_count_must_match(self):
        with pytest.raises(ShapeError, match="labels"):
            VolumeBatch(images=np.zeros((2, 1, 1, 8, 8)), labels=[0])

    def test_zero_slices_rejected(self):
        with pytest.raises(ShapeError, match="zero slices"):
            VolumeBatch(images=np.zeros((2, 0, 1, 8, 8)), labels=[0, 1])

    def test_subset_keeps_every_field(self, toy_batch):
        toy_batch.indices = np.arange(len(toy_batch)) + 100
        part = toy_batch.subset([1, 3])
        assert len(part) == 2
        np.testing.assert_array_equal(part.labels, [1, 3])
        np.testing.assert_array_equal(part.indices, [101, 103])
        assert part.saliency.shape == (2, 2, 1, IMAGE_SIZE, IMAGE_SIZE)

    def test_with_saliency_checks_shape(self, toy_batch):
        with pytest.raises(ShapeError, match="saliency"):
            toy_batch.with_saliency(np.zeros((6, 2, 2, IMAGE_SIZE, IMAGE_SIZE)))


class TestOneHot:
    def test_encoding(self):
        np.testing.assert_array_equal(one_hot(np.array([2, 0]), 3), [[0, 0, 1], [1, 0, 0]])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            one_hot(np.array([3]), 3)


class TestClassifier:
    """Construction, shapes and forward behaviour of ModelGraph classifiers."""

    def test_logit_shape(self, toy_classifier, toy_batch):
        logits = toy_classifier.logits(toy_batch.images)
        assert logits.shape == (6, 4)

    def test_tap_indices_and_shapes(self, toy_classifier):
        assert toy_classifier.tap_indices == {"early": 0, "middle": 3, "late": 6}
        assert toy_classifier.shapes[0] == (4, 16, 16)
        assert toy_classifier.output_shape == (4, 2, 2)
        assert toy_classifier.feature_dim == 16

    def test_same_seed_same_weights(self):
        first = build_classifier(tiny_layers(), 4, (IMAGE_SIZE, IMAGE_SIZE), seed=5, head=[])
        second = build_classifier(tiny_layers(), 4, (IMAGE_SIZE, IMAGE_SIZE), seed=5, head=[])
        for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_initialization_bound(self, toy_classifier):
        weight = toy_classifier.params["features.3.weight"].data
        assert np.abs(weight).max() <= 1.0 / np.sqrt(4 * 9)

    def test_duplicate_tap_labels_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            build_classifier([conv(4, "early"), act(), conv(4, "early")], 2, (8, 8), head=[])

    def test_linear_in_feature_stack_rejected(self):
        with pytest.raises(ShapeError, match="head"):
            build_classifier([conv(4), LayerSpec(kind="linear", channels=3)], 2, (8, 8))

    def test_pool_window_larger_than_features(self):
        with pytest.raises(ShapeError, match="window"):
            build_classifier([conv(2), LayerSpec(kind="pool", kernel=9)], 2, (8, 8))

    def test_slice_shape_mismatch(self, toy_classifier):
        with pytest.raises(ShapeError, match="slice shape"):
            toy_classifier.logits(np.zeros((1, 2, 1, 8, 8), dtype=np.float32))

    def test_single_volume_without_batch_axis(self, toy_classifier, toy_volume):
        assert toy_classifier.logits(toy_volume).shape == (1, 4)

    def test_mean_slice_combination_ignores_slice_order(self, toy_classifier, toy_volume):
        forward = toy_classifier.logits(toy_volume).data
        reverse = toy_classifier.logits(toy_volume[::-1].copy()).data
        np.testing.assert_allclose(forward, reverse, rtol=1e-5, atol=1e-6)

    def test_parameters_upto(self, toy_classifier):
        assert len(toy_classifier.parameters(upto=0)) == 2
        assert len(toy_classifier.parameters(upto=3)) == 4
        assert len(toy_classifier.parameters()) == 8

    def test_forward_with_taps(self, toy_classifier, toy_batch):
        probs, taps = forward_classifier(toy_classifier, toy_batch, taps_out=True)
        np.testing.assert_allclose(probs.data.sum(axis=1), np.ones(6), rtol=1e-5)
        assert taps["early"].shape == (6, 2, 4, 16, 16)
        assert taps["middle"].shape == (6, 2, 4, 8, 8)
        assert taps["late"].shape == (6, 2, 4, 4, 4)

    def test_dropout_only_in_training(self, toy_volume):
        layers = [conv(4), act(), LayerSpec(kind="dropout", p=0.5), pool()]
        model = build_classifier(layers, 2, (IMAGE_SIZE, IMAGE_SIZE), seed=1, head=[]).eval()
        np.testing.assert_array_equal(model.logits(toy_volume).data, model.logits(toy_volume).data)

    def test_preactivations_per_parameterized_layer(self, toy_classifier, toy_batch):
        records = collect_preactivations(toy_classifier, toy_batch)
        assert [r.shape for r in records] == [(12, 4, 16, 16), (12, 4, 8, 8), (12, 4, 4, 4), (6, 4)]


class TestAutoencoder:
    def test_latent_and_reconstruction_shapes(self, toy_autoencoder, toy_volume):
        assert toy_autoencoder.latent_shape == (4, 4, 4)
        z = toy_autoencoder.encode(toy_volume)
        assert z.shape == (2, 4, 4, 4)
        x = toy_autoencoder.decode(z)
        assert x.shape == toy_volume.shape
        assert np.all((x.data > 0) & (x.data < 1))

    def test_sigmoid_appended_when_missing(self):
        decoder = [LayerSpec(kind="upsample"), conv(4), act(), LayerSpec(kind="upsample"), conv(1)]
        ae = Autoencoder(tiny_encoder(), decoder, image_size=(IMAGE_SIZE, IMAGE_SIZE))
        assert ae.decoder.layers[-1].activation == "sigmoid"

    def test_decoder_must_restore_image_shape(self):
        with pytest.raises(ShapeError, match="decoder output"):
            Autoencoder(tiny_encoder(), [LayerSpec(kind="upsample"), conv(1), act("sigmoid")],
                        image_size=(IMAGE_SIZE, IMAGE_SIZE))

    def test_gradients_reach_the_latent(self, toy_autoencoder, toy_volume):
        z = Tensor(toy_autoencoder.encode(toy_volume).data, requires_grad=True)
        toy_autoencoder.decode(z).sum().backward()
        assert z.grad is not None
        assert np.any(z.grad != 0)


class TestTrainModel:
    """The shared training loop for classifiers and autoencoders."""

    def test_classifier_training_log(self, toy_classifier, toy_batch):
        log = train_model(toy_classifier, toy_batch, 2, seed=3, training=TrainingConfig(epochs=2, batch_size=4))
        assert [record.epoch for record in log.epochs] == [0, 1]
        assert all(record.accuracy is not None for record in log.epochs)
        assert toy_classifier.trained
        assert not toy_classifier.training

    def test_training_is_deterministic(self, toy_batch):
        states = []
        for _ in range(2):
            model = build_classifier(tiny_layers(), 4, (IMAGE_SIZE, IMAGE_SIZE), seed=9, head=[])
            train_model(model, toy_batch, 1, seed=4, training=TrainingConfig(epochs=1, batch_size=2))
            states.append(model.state_dict())
        for name in states[0]:
            np.testing.assert_array_equal(states[0][name], states[1][name], err_msg=name)

    def test_training_changes_weights(self, toy_classifier, toy_batch):
        before = toy_classifier.state_dict()
        train_model(toy_classifier, toy_batch, 1, seed=0, training=TrainingConfig(epochs=1, batch_size=3))
        after = toy_classifier.state_dict()
        assert any(not np.array_equal(before[name], after[name]) for name in before)

    def test_autoencoder_reconstruction_loss(self, toy_autoencoder, toy_batch):
        log = train_model(toy_autoencoder, toy_batch, 1, seed=0, loss_spec="reconstruction",
                          training=TrainingConfig(epochs=1, batch_size=3))
        assert log.epochs[0].accuracy is None
        assert log.epochs[0].loss > 0
        assert toy_autoencoder.trained

    def test_zero_epochs(self, toy_classifier, toy_batch):
        assert train_model(toy_classifier, toy_batch, 0, seed=0).epochs == []
        assert not toy_classifier.trained

    def test_unknown_loss(self, toy_classifier, toy_batch):
        with pytest.raises(ValueError, match="Unknown loss"):
            train_model(toy_classifier, toy_batch, 1, seed=0, loss_spec="hinge")

    def test_empty_data(self, toy_classifier, toy_batch):
        with pytest.raises(ValueError, match="empty"):
            train_model(toy_classifier, toy_batch.subset([]), 1, seed=0)


class TestTrainingQuality:
    """Training on easy problems must actually learn them."""

    def test_separable_toy_is_learned(self, rng):
        labels = np.repeat([0, 1], 20)
        low = np.where(labels == 0, 0.0, 0.6)[:, None, None, None, None]
        images = (low + rng.uniform(0.0, 0.4, size=(40, 1, 1, 8, 8))).astype(np.float32)
        data = VolumeBatch(images=images, labels=labels)
        model = build_classifier([conv(2), act(), pool()], num_classes=2, image_size=(8, 8), seed=1, head=[])
        training = TrainingConfig(epochs=30, batch_size=8, optimizer=OptimizerConfig(learning_rate=0.02))
        train_model(model, data, 30, seed=2, training=training)
        with no_grad():
            predicted = np.argmax(model.logits(images).data, axis=-1)
        assert np.mean(predicted == labels) > 0.9

    def test_autoencoder_beats_the_mean_image(self, rng):
        levels = np.where(rng.random(24) < 0.5, 0.1, 0.9)
        images = np.broadcast_to(levels[:, None, None, None, None], (24, 1, 1, IMAGE_SIZE, IMAGE_SIZE))
        images = (images + rng.normal(0.0, 0.02, size=images.shape)).clip(0.0, 1.0).astype(np.float32)
        data = VolumeBatch(images=images, labels=np.zeros(24, dtype=int))
        model = Autoencoder(tiny_encoder(), tiny_decoder(), image_size=(IMAGE_SIZE, IMAGE_SIZE), seed=5)
        training = TrainingConfig(epochs=40, batch_size=4, optimizer=OptimizerConfig(learning_rate=0.02))
        train_model(model, data, 40, seed=6, loss_spec="reconstruction", training=training)

        with no_grad():
            reconstruction = model.reconstruct(images).data
        mean_image_error = np.mean((images - images.mean(axis=0, keepdims=True)) ** 2)
        assert np.mean((images - reconstruction) ** 2) < mean_image_error
