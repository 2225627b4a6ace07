"""
Unit tests for localization scores, classification metrics and the training harnesses.
"""

import numpy as np
import pytest

from artifact_store import ArtifactStore
from counterfactual import SaliencyMap
from evaluation import (
    ABLATION_VARIANTS,
    AcatExperiment,
    binomial_interval,
    classification_metrics,
    confusion_frame,
    dropout_control,
    iou_dice,
    pointing_game,
    pointing_hits,
    predict_probabilities,
    preactivation_variance,
    reports_to_frame,
    run_ablation_suite,
    saliency_method_suite,
    summarize,
    write_csv,
)
from models.config_models import AcatConfig, ClassifierConfig, TrainingConfig
from synth_data import Geometry

from conftest import tiny_layers


def _peak_map(h, w, shape=(6, 4)):
    plane = np.zeros(shape, dtype=np.float32)
    plane[h, w] = 1.0
    return plane


class TestPointingGame:
    """Top pixel of the slice-max map against the true regions."""

    def test_hits_and_misses(self):
        geometry = Geometry(6, 4)
        maps = [_peak_map(0, 0), _peak_map(5, 3), _peak_map(2, 1), _peak_map(4, 0)]
        truths = [0, [4, 5], 3, (1, 4)]
        assert pointing_hits(maps, truths, geometry) == [True, True, False, True]
        assert pointing_game(maps, truths, geometry) == pytest.approx(0.75)

    def test_ties_go_to_the_first_pixel_in_raster_order(self):
        geometry = Geometry(6, 4)
        flat = np.ones((6, 4), dtype=np.float32)
        assert pointing_hits([flat, flat], [0, 5], geometry) == [True, False]

    def test_volume_maps_are_reduced_by_slice_max(self):
        geometry = Geometry(6, 4)
        values = np.zeros((3, 1, 6, 4), dtype=np.float32)
        values[2, 0, 5, 3] = 0.9
        values[0, 0, 0, 0] = 0.5
        saliency = SaliencyMap(values, "gradient", "baseline")
        assert pointing_hits([saliency], [5], geometry) == [True]

    def test_input_validation(self):
        geometry = Geometry(6, 4)
        with pytest.raises(ValueError, match="at least one map"):
            pointing_game([], [], geometry)
        with pytest.raises(ValueError, match="ground-truth"):
            pointing_game([_peak_map(0, 0)], [0, 1], geometry)
        with pytest.raises(ValueError, match="extent"):
            pointing_game([np.zeros((4, 4))], [0], geometry)


class TestBinomialInterval:
    def test_contains_the_rate(self):
        low, high = binomial_interval(5, 10)
        assert low < 0.5 < high

    def test_edges(self):
        low, high = binomial_interval(0, 10)
        assert low == 0.0
        assert high == pytest.approx(1.0 - 0.025 ** 0.1, abs=1e-6)
        assert binomial_interval(10, 10)[1] == 1.0


class TestIouDice:
    def test_top_n_binarization(self):
        values = np.array([0.9, 0.8, 0.7, 0.1, 0.0, 0.2])
        truth = np.array([1, 1, 0, 0, 0, 1])
        iou, dice = iou_dice(values, truth)
        assert iou == pytest.approx(2 / 4)
        assert dice == pytest.approx(2 / 3)

    def test_perfect_overlap(self):
        truth = np.zeros((1, 1, 4, 4), dtype=np.uint8)
        truth[0, 0, 1:3, 1:3] = 1
        assert iou_dice(truth.astype(np.float32), truth) == (1.0, 1.0)

    def test_ties_take_the_lowest_index(self):
        values = np.ones(6)
        truth = np.array([0, 0, 0, 0, 1, 1])
        assert iou_dice(values, truth) == (0.0, 0.0)

    def test_empty_truth(self):
        with pytest.raises(ValueError, match="empty"):
            iou_dice(np.ones(4), np.zeros(4))

    def test_size_mismatch(self):
        with pytest.raises(ValueError, match="pixels"):
            iou_dice(np.ones(4), np.ones(5))


class TestClassificationMetrics:
    def test_confusion_derived_metrics(self):
        labels = np.array([0, 0, 1, 2, 3])
        predictions = np.array([0, 1, 1, 2, 0])
        probs = np.eye(4)[predictions]
        report = classification_metrics(probs, labels, tiers=np.array([0, 1, 1, 2, 2]))
        assert report.accuracy == pytest.approx(3 / 5)
        assert report.per_class_accuracy == [0.5, 1.0, 1.0, 0.0]
        assert report.sensitivity == pytest.approx(2 / 3)
        assert report.specificity == pytest.approx(1 / 2)
        assert report.confusion_matrix[0] == [1, 1, 0, 0]
        assert report.per_tier_accuracy == {"1": 0.5, "2": 0.5, "3": None, "4": None}

    def test_undefined_metrics_are_none(self):
        report = classification_metrics(np.eye(4)[[0, 0]], np.array([0, 0]))
        assert report.sensitivity is None
        assert report.specificity == 1.0
        assert report.per_class_accuracy[1:] == [None, None, None]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            classification_metrics(np.eye(4)[[0, 1]], np.array([0]))

    def test_confusion_frame(self):
        report = classification_metrics(np.eye(2)[[0, 1, 1]], np.array([0, 0, 1]))
        frame = confusion_frame(report)
        assert list(frame.columns) == ["true", "pred_0", "pred_1"]
        assert frame.loc[0, "pred_1"] == 1


class TestMetricOracles:
    """Seeded random instances scored against brute-force re-implementations."""

    @pytest.mark.parametrize("seed", range(20))
    def test_pointing_game_against_a_raster_scan(self, seed):
        rng = np.random.default_rng(seed)
        geometry = Geometry(12, 12)
        maps = [rng.uniform(0.0, 1.0, size=(2, 1, 12, 12)) for _ in range(5)]
        truths = [rng.choice(6, size=rng.integers(1, 4), replace=False).tolist() for _ in range(5)]

        expected = []
        for values, truth in zip(maps, truths):
            best, where = -np.inf, None
            for h in range(12):
                for w in range(12):
                    value = max(values[s, 0, h, w] for s in range(2))
                    if value > best:
                        best, where = value, (h, w)
            expected.append((where[0] // 4) * 2 + where[1] // 6 in truth)

        assert pointing_hits(maps, truths, geometry) == expected
        assert pointing_game(maps, truths, geometry) == pytest.approx(sum(expected) / 5)
        rescaled = [5.0 * np.sqrt(values) + 2.0 for values in maps]
        assert pointing_hits(rescaled, truths, geometry) == expected

    @pytest.mark.parametrize("seed", range(20))
    def test_iou_and_dice_against_sorted_selection(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.integers(0, 5, size=30).astype(np.float64)
        truth = rng.random(30) < 0.3
        truth[rng.integers(30)] = True

        n = int(truth.sum())
        chosen = set(sorted(range(30), key=lambda i: (-values[i], i))[:n])
        actual = set(np.flatnonzero(truth).tolist())
        overlap = len(chosen & actual)

        iou, dice = iou_dice(values, truth)
        assert iou == pytest.approx(overlap / len(chosen | actual))
        assert dice == pytest.approx(2 * overlap / (len(chosen) + len(actual)))
        assert dice == pytest.approx(2 * iou / (1 + iou))

    @pytest.mark.parametrize("seed", range(20))
    def test_confusion_metrics_against_counting(self, seed):
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.ones(4), size=15)
        labels = rng.integers(0, 4, size=15)

        matrix = [[0] * 4 for _ in range(4)]
        for row, label in zip(probs, labels):
            matrix[label][max(range(4), key=lambda k: row[k])] += 1
        lesion = [matrix[t][p] for t in range(1, 4) for p in range(4)]
        found = sum(matrix[t][p] for t in range(1, 4) for p in range(1, 4))
        healthy = sum(matrix[0])

        report = classification_metrics(probs, labels)
        assert report.confusion_matrix == matrix
        assert report.accuracy == pytest.approx(sum(matrix[k][k] for k in range(4)) / 15)
        for k in range(4):
            support = sum(matrix[k])
            assert report.per_class_accuracy[k] == (pytest.approx(matrix[k][k] / support) if support else None)
        assert report.sensitivity == (pytest.approx(found / sum(lesion)) if sum(lesion) else None)
        assert report.specificity == (pytest.approx(matrix[0][0] / healthy) if healthy else None)


class TestSummaries:
    def test_single_run_has_no_standard_error(self):
        report = summarize("test_accuracy", "acat", [0.7], [11])
        assert report.value == pytest.approx(0.7)
        assert report.standard_error is None

    def test_standard_error_over_runs(self):
        report = summarize("test_accuracy", "acat", [1.0, 2.0, 3.0], [1, 2, 3])
        assert report.value == pytest.approx(2.0)
        assert report.standard_error == pytest.approx(1.0 / np.sqrt(3))

    def test_csv_has_one_row_per_run(self, tmp_path):
        reports = [summarize("test_accuracy", "acat", [0.5, 0.25], [1, 2], "abc"),
                   summarize("pointing_game", "gradient", [1.0], [1], "def")]
        frame = reports_to_frame(reports)
        assert len(frame) == 3
        store = ArtifactStore(str(tmp_path))
        write_csv(store, "reports", "eval.csv", frame)
        assert store.load_file("reports", "eval.csv") == (
            "metric,label,seed,value,config_hash\n"
            "test_accuracy,acat,1,0.500000,abc\n"
            "test_accuracy,acat,2,0.250000,abc\n"
            "pointing_game,gradient,1,1.000000,def\n"
        )


class TestModelMeasurements:
    def test_probabilities_do_not_depend_on_chunking(self, toy_classifier, toy_batch):
        whole = predict_probabilities(toy_classifier, toy_batch)
        pieces = predict_probabilities(toy_classifier, toy_batch, chunk=4)
        np.testing.assert_allclose(whole, pieces, rtol=1e-6)
        np.testing.assert_allclose(whole.sum(axis=1), np.ones(6), rtol=1e-5)

    def test_preactivation_variance(self, toy_classifier, toy_batch):
        clean = preactivation_variance(toy_classifier, toy_batch)
        noisy = preactivation_variance(toy_classifier, toy_batch, noise_sigma=1.0, seed=3)
        assert len(clean) == 4
        assert noisy[0] > clean[0]
        assert noisy == preactivation_variance(toy_classifier, toy_batch, noise_sigma=1.0, seed=3)


class TestHarnesses:
    """Ablation, saliency-method and dropout-control runs on a tiny dataset."""

    @pytest.fixture
    def experiment(self, tiny_dataset, rng):
        maps = rng.uniform(0.0, 1.0, size=(len(tiny_dataset), 2, 1, 32, 32)).astype(np.float32)
        training = TrainingConfig(epochs=1, batch_size=4)
        return AcatExperiment(
            dataset=tiny_dataset,
            saliency=maps,
            classifier=ClassifierConfig(layers=tiny_layers(), head=[]),
            acat=AcatConfig(attention_hidden=4, training=training),
            baseline_training=training,
        )

    def test_ablation_suite(self, experiment):
        reports = run_ablation_suite(experiment, [0])
        assert [report.label for report in reports] == [name for name, _ in ABLATION_VARIANTS]
        for report in reports:
            assert 0.0 <= report.value <= 1.0
            assert report.standard_error is None
            assert report.seeds == [0]
        assert len({report.config_hash for report in reports}) == 4
        assert list(experiment.baselines) == [0]

    def test_saliency_method_suite(self, experiment):
        reports = saliency_method_suite(experiment, {"gradient": {0: experiment.maps(0)}}, [0])
        assert [report.label for report in reports] == ["maps_gradient"]

    def test_dropout_control(self, experiment):
        reports = dropout_control(experiment, [0.0, 0.5], [0])
        assert [report.label for report in reports] == ["dropout_p0", "dropout_p0.5"]

    def test_dropout_probability_validated(self, experiment):
        with pytest.raises(ValueError, match="dropout control"):
            dropout_control(experiment, [1.0], [0])
