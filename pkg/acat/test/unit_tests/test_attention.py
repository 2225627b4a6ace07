"""
Unit tests for attention taps, mask fusion, slice attention and AcatModel.
"""

import numpy as np
import pytest

from attention import (
    FUSED,
    acat_forward,
    build_acat_model,
    dropout_control_model,
    fuse_masks,
    load_acat_model,
    modulate,
    new_fusion,
    new_slice_attention,
    new_tap,
    slice_attention,
    spatial_attention_mask,
)
from errors import ShapeError
from models.config_models import AcatConfig, TrainingConfig, act, conv, pool
from nets import build_classifier, train_model
from serialization import save_checkpoint
from tensor_core import Tensor, backward, tensor_sum

NO_ATTENTION = dict(use_early=False, use_middle=False, use_late=False, use_fusion=False, slice_combine="mean")


def _config(**changes):
    return AcatConfig(attention_hidden=4, **changes)


class TestTapMasks:
    def test_mask_is_single_channel_and_open_interval(self, rng):
        tap = new_tap("early", 0, (6, 6), seed=1)
        mask = spatial_attention_mask(tap, Tensor(rng.standard_normal((3, 4, 6, 6))))
        assert mask.shape == (3, 1, 6, 6)
        assert np.all((mask.data > 0) & (mask.data < 1))

    def test_extent_mismatch(self, rng):
        tap = new_tap("middle", 3, (4, 4), seed=1)
        with pytest.raises(ShapeError, match="middle"):
            spatial_attention_mask(tap, Tensor(rng.standard_normal((1, 2, 6, 6))))

    def test_modulation_is_f_plus_f_times_mask(self, rng):
        features = Tensor(rng.standard_normal((2, 3, 4, 4)))
        mask = Tensor(rng.uniform(0, 1, size=(2, 1, 4, 4)))
        expected = features.data + features.data * mask.data
        np.testing.assert_allclose(modulate(features, mask).data, expected)

    def test_zero_mask_is_identity(self, rng):
        features = Tensor(rng.standard_normal((1, 3, 4, 4)))
        np.testing.assert_array_equal(modulate(features, Tensor(np.zeros((1, 1, 4, 4)))).data, features.data)


class TestFusion:
    def test_masks_pooled_to_final_extent(self, rng):
        fusion = new_fusion(["early", "middle"], (2, 2), seed=3)
        masks = [Tensor(rng.uniform(0, 1, size=(5, 1, 8, 8))), Tensor(rng.uniform(0, 1, size=(5, 1, 4, 4)))]
        fused = fuse_masks(fusion, masks)
        assert fused.shape == (5, 1, 2, 2)
        assert np.all((fused.data > 0) & (fused.data < 1))

    def test_mask_count_must_match(self, rng):
        fusion = new_fusion(["early", "middle", "late"], (2, 2), seed=3)
        with pytest.raises(ShapeError, match="3 masks"):
            fuse_masks(fusion, [Tensor(np.ones((1, 1, 2, 2)))])


class TestSliceAttention:
    def test_weights_and_weighted_mean(self, rng):
        mlp = new_slice_attention(feature_dim=5, hidden=3, p=0.0, seed=2)
        features = Tensor(rng.standard_normal((2, 4, 5)))
        weights, combined = slice_attention(mlp, features)
        assert weights.shape == (2, 4)
        assert np.all((weights.data > 0) & (weights.data < 1))
        w = weights.data[..., None]
        expected = (w * features.data).sum(axis=1) / w.sum(axis=1)
        np.testing.assert_allclose(combined.data, expected, rtol=1e-5)

    def test_identical_slices_combine_to_the_slice(self, rng):
        mlp = new_slice_attention(feature_dim=5, hidden=3, p=0.0, seed=2)
        row = rng.standard_normal(5)
        _, combined = slice_attention(mlp, Tensor(np.stack([row, row, row])))
        np.testing.assert_allclose(combined.data, row, rtol=1e-5)

    def test_unbatched_shapes(self, rng):
        mlp = new_slice_attention(feature_dim=5, hidden=3, p=0.1, seed=2)
        weights, combined = slice_attention(mlp, Tensor(rng.standard_normal((3, 5))))
        assert weights.shape == (3,)
        assert combined.shape == (5,)


class TestAcatModel:
    """Construction, forward pass and reductions of the attention-augmented classifier."""

    def test_components_follow_flags(self, toy_classifier):
        full = build_acat_model(toy_classifier, _config(), seed=0)
        assert sorted(full.taps) == ["early", "late", "middle"]
        assert full.fusion is not None and full.slice_mlp is not None

        reduced = build_acat_model(toy_classifier, _config(use_fusion=False, use_late=False, slice_combine="mean"), 0)
        assert sorted(reduced.taps) == ["early", "middle"]
        assert reduced.fusion is None and reduced.slice_mlp is None

    def test_image_branch_starts_from_baseline(self, toy_classifier):
        model = build_acat_model(toy_classifier, _config(), seed=0)
        for name, param in toy_classifier.named_parameters():
            np.testing.assert_array_equal(model.image.params[name].data, param.data)

    def test_fresh_image_branch_without_baseline_init(self, toy_classifier):
        model = build_acat_model(toy_classifier, _config(init_from_baseline=False), seed=0)
        baseline = toy_classifier.params["features.0.weight"].data
        assert not np.array_equal(model.image.params["features.0.weight"].data, baseline)

    def test_enabled_tap_must_be_marked(self):
        untapped = build_classifier([conv(4, "early"), act(), pool()], 4, (16, 16), head=[])
        with pytest.raises(ValueError, match="not marked"):
            build_acat_model(untapped, _config(), seed=0)

    def test_logits_and_masks(self, toy_classifier, toy_batch):
        model = build_acat_model(toy_classifier, _config(), seed=0)
        masks = {}
        logits = model.logits(toy_batch.images, toy_batch.saliency, masks_out=masks)
        assert logits.shape == (6, 4)
        assert masks["early"].shape == (12, 1, 16, 16)
        assert masks["middle"].shape == (12, 1, 8, 8)
        assert masks["late"].shape == (12, 1, 4, 4)
        assert masks[FUSED].shape == (12, 1, 2, 2)

    def test_masks_depend_on_saliency(self, toy_classifier, toy_batch):
        model = build_acat_model(toy_classifier, _config(), seed=0)
        first, second = {}, {}
        model.logits(toy_batch.images, toy_batch.saliency, masks_out=first)
        model.logits(toy_batch.images, 1.0 - toy_batch.saliency, masks_out=second)
        assert not np.allclose(first["early"].data, second["early"].data)

    def test_attention_disabled_reduces_to_baseline(self, toy_classifier, toy_batch):
        model = build_acat_model(toy_classifier, _config(**NO_ATTENTION), seed=0)
        np.testing.assert_array_equal(model.logits(toy_batch.images, toy_batch.saliency).data,
                                      toy_classifier.logits(toy_batch.images).data)

    def test_zero_masks_reduce_to_baseline(self, toy_classifier, toy_batch):
        model = build_acat_model(toy_classifier, _config(slice_combine="mean"), seed=0)
        overrides = {"early": 0.0, "middle": 0.0, "late": 0.0, FUSED: 1.0}
        logits = model.logits(toy_batch.images, toy_batch.saliency, mask_overrides=overrides)
        np.testing.assert_allclose(logits.data, toy_classifier.logits(toy_batch.images).data, rtol=1e-6, atol=1e-7)

    def test_unit_masks_double_tapped_features(self, toy_classifier, toy_volume):
        model = build_acat_model(toy_classifier, _config(use_middle=False, use_late=False, use_fusion=False,
                                                          slice_combine="mean"), seed=0)
        seen = {}

        def observer(index, spec, out):
            if index == 1:
                seen["activation"] = out.data.copy()
            return out

        maps = np.zeros((1, 2, 1, 16, 16), dtype=np.float32)
        model.logits(toy_volume[None], maps, observer=observer, mask_overrides={"early": 1.0})
        doubled = 2.0 * toy_classifier.features(Tensor(toy_volume), upto=0).data
        expected = np.where(doubled > 0, doubled, 0.01 * doubled)
        np.testing.assert_allclose(seen["activation"], expected, rtol=1e-5, atol=1e-6)

    def test_forward_probabilities(self, toy_classifier, toy_batch):
        model = build_acat_model(toy_classifier, _config(), seed=0)
        probs = acat_forward(model, toy_batch)
        assert probs.shape == (6, 4)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, rtol=1e-5)
        as_list = acat_forward(model, toy_batch, saliency=list(toy_batch.saliency))
        np.testing.assert_array_equal(as_list.data, probs.data)

    def test_tap_gradient_is_mask_plus_one(self, toy_classifier, toy_batch):
        model = build_acat_model(toy_classifier, _config(), seed=0).freeze()
        tap_index = {tap.layer_index: label for label, tap in model.taps.items()}
        captured, masks = {}, {}

        def observer(index, spec, out):
            if index in tap_index:
                captured[tap_index[index]] = out.data.copy()
            return out

        model.logits(toy_batch.images, toy_batch.saliency, observer=observer, masks_out=masks)
        assert sorted(captured) == ["early", "late", "middle"]
        for label, values in captured.items():
            features = Tensor(values, requires_grad=True)
            mask = masks[label].detach()
            backward(tensor_sum(modulate(features, mask)))
            expected = np.broadcast_to(mask.data + 1.0, values.shape)
            np.testing.assert_allclose(features.grad, expected, rtol=0, atol=1e-6)

    def test_no_gradient_reaches_the_saliency_input(self, toy_classifier, toy_batch):
        model = build_acat_model(toy_classifier, _config(), seed=0)
        saliency = Tensor(toy_batch.saliency, requires_grad=True)
        backward(tensor_sum(model.logits(toy_batch.images, saliency)))
        assert saliency.grad is None
        assert model.taps["early"].weight.grad is not None

    def test_missing_saliency(self, toy_classifier, toy_batch):
        model = build_acat_model(toy_classifier, _config(), seed=0)
        with pytest.raises(ValueError, match="missing saliency"):
            model.logits(toy_batch.images, None)

    def test_saliency_shape_mismatch(self, toy_classifier, toy_batch):
        model = build_acat_model(toy_classifier, _config(), seed=0)
        with pytest.raises(ShapeError):
            model.logits(toy_batch.images, toy_batch.saliency[:, :1])

    def test_parameters_cover_only_used_components(self, toy_classifier):
        reduced = build_acat_model(toy_classifier, _config(**NO_ATTENTION), seed=0)
        assert len(reduced.parameters()) == len(toy_classifier.parameters())
        full = build_acat_model(toy_classifier, _config(), seed=0)
        # 8 image + 6 saliency-branch conv params up to the late tap + 6 tap + 2 fusion + 4 slice MLP
        assert len(full.parameters()) == 8 + 6 + 6 + 2 + 4

    def test_training_every_variant(self, toy_classifier, toy_batch):
        training = TrainingConfig(epochs=1, batch_size=3)
        for changes in ({}, {"use_fusion": False}, NO_ATTENTION):
            model = build_acat_model(toy_classifier, _config(training=training, **changes), seed=1)
            log = train_model(model, toy_batch, 1, seed=1, training=training)
            assert len(log.epochs) == 1
            assert model.trained

    def test_freeze(self, toy_classifier):
        model = build_acat_model(toy_classifier, _config(), seed=0).freeze()
        assert not any(param.requires_grad for param in model.parameters())

    def test_checkpoint_round_trip(self, toy_classifier, toy_batch, store):
        model = build_acat_model(toy_classifier, _config(), seed=4, name="acat")
        save_checkpoint(model, store, "acat")
        restored = load_acat_model(store, "acat")
        np.testing.assert_array_equal(restored.logits(toy_batch.images, toy_batch.saliency).data,
                                      model.eval().logits(toy_batch.images, toy_batch.saliency).data)

    def test_bound_classifier_matches_model(self, toy_classifier, toy_batch):
        model = build_acat_model(toy_classifier, _config(), seed=0)
        bound = model.bind(toy_batch.saliency[2])
        assert bound.name == "acat-bound"
        np.testing.assert_allclose(bound.logits(toy_batch.images[2]).data,
                                   model.logits(toy_batch.images[2:3], toy_batch.saliency[2:3]).data)


class TestDropoutControl:
    def test_copy_matches_baseline_in_eval(self, toy_classifier, toy_batch):
        control = dropout_control_model(toy_classifier, 0.5, seed=0).eval()
        assert control.tap_dropout == 0.5
        np.testing.assert_array_equal(control.logits(toy_batch.images).data,
                                      toy_classifier.logits(toy_batch.images).data)

    def test_training_mode_drops_tap_features(self, toy_classifier, toy_batch):
        control = dropout_control_model(toy_classifier, 0.5, seed=0).train()
        assert not np.allclose(control.logits(toy_batch.images).data, toy_classifier.logits(toy_batch.images).data)

    def test_invalid_probability(self, toy_classifier):
        with pytest.raises(ValueError):
            dropout_control_model(toy_classifier, 1.0, seed=0)
