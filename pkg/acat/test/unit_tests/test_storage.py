"""
Unit tests for the artifact store, checkpoints and saliency map files.
"""

import numpy as np
import pytest

from artifact_store import ArtifactStore
from config import MANIFEST_FILE, WEIGHTS_FILE
from counterfactual import CounterfactualTrace, SaliencyMap, TraceStep
from nets import load_model
from saliency_io import (
    TRACES_DIR,
    load_saliency_directory,
    read_saliency_map,
    scan_map_files,
    write_map_manifest,
    write_saliency_map,
)
from serialization import pack_tensors, read_checkpoint, save_checkpoint, unpack_tensors


class TestArtifactStore:
    def test_text_and_json_round_trip(self, store):
        store.save_file("a/b", "note.txt", "hello")
        store.save_json("a", "doc.json", {"b": 1, "a": [1, 2]})
        assert store.load_file("a/b", "note.txt") == "hello"
        assert store.load_json("a", "doc.json") == {"a": [1, 2], "b": 1}

    def test_json_is_byte_stable(self, store):
        store.save_json("", "first.json", {"b": 1, "a": 2})
        store.save_json("", "second.json", {"a": 2, "b": 1})
        assert store.load_file("", "first.json") == store.load_file("", "second.json")

    def test_missing_artifact(self, store):
        with pytest.raises(FileNotFoundError, match="Expected artifact not found"):
            store.load_binary_file("nowhere", "x.bin")

    def test_listing(self, store):
        for name in ("0002.f32", "0001.f32", "0001.json"):
            store.save_binary_file("maps", name, b"")
        store.save_file("maps/sub", "x.txt", "")
        assert store.list_files("maps") == ["0001.f32", "0001.json", "0002.f32"]
        assert store.list_files("maps", ".f32") == ["0001.f32", "0002.f32"]
        assert store.list_files("absent") == []

    def test_delete(self, store):
        store.save_file("", "x.txt", "x")
        assert store.delete_file("", "x.txt")
        assert not store.delete_file("", "x.txt")


class TestCheckpoints:
    """Tensor packing and model checkpoints."""

    def test_pack_offsets(self):
        blob, entries = pack_tensors([("w", np.ones((2, 3), dtype=np.float32)), ("b", np.arange(4.0))])
        assert len(blob) == 24 + 32
        assert [(e["name"], e["dtype"], e["offset"], e["length"]) for e in entries] == [
            ("w", "f32", 0, 24), ("b", "f64", 24, 32)]
        tensors = unpack_tensors(blob, entries)
        assert tensors["w"].dtype == np.float32
        np.testing.assert_array_equal(tensors["b"], np.arange(4.0))

    def test_little_endian_layout(self):
        blob, _ = pack_tensors([("x", np.array([1.0], dtype=np.float32))])
        assert blob == b"\x00\x00\x80\x3f"

    def test_truncated_blob(self):
        blob, entries = pack_tensors([("w", np.ones(4, dtype=np.float32))])
        with pytest.raises(ValueError, match="too short"):
            unpack_tensors(blob[:8], entries)

    def test_classifier_round_trip(self, toy_classifier, toy_batch, store):
        toy_classifier.trained = True
        save_checkpoint(toy_classifier, store, "baseline", extra={"seed": 5})
        restored = load_model(store, "baseline")
        assert restored.trained
        assert restored.tap_indices == toy_classifier.tap_indices
        np.testing.assert_array_equal(restored.logits(toy_batch.images).data,
                                      toy_classifier.logits(toy_batch.images).data)
        manifest, tensors = read_checkpoint(store, "baseline")
        assert manifest["seed"] == 5
        assert set(tensors) == set(toy_classifier.state_dict())

    def test_autoencoder_round_trip(self, toy_autoencoder, toy_volume, store):
        save_checkpoint(toy_autoencoder, store, "ae")
        restored = load_model(store, "ae")
        assert not restored.trained
        np.testing.assert_array_equal(restored.encode(toy_volume).data, toy_autoencoder.encode(toy_volume).data)

    def test_rewriting_gives_identical_bytes(self, toy_classifier, store):
        save_checkpoint(toy_classifier, store, "one")
        save_checkpoint(toy_classifier, store, "two")
        for name in (MANIFEST_FILE, WEIGHTS_FILE):
            assert store.load_binary_file("one", name) == store.load_binary_file("two", name)


def _trace(target):
    probs = np.array([0.6, 0.4])
    step = TraceStep(step=0, latent=np.zeros(3), image=np.zeros((1, 1, 2, 2)), probs=probs,
                     objective=0.5, ce=0.5, l1=0.0)
    return CounterfactualTrace(target_class=target, alpha=1.0, step_size=1.0, steps=[step])


class TestSaliencyFiles:
    """NNNN.f32 maps with JSON sidecars and PGM previews."""

    def test_round_trip_with_traces(self, store, rng):
        values = rng.uniform(0, 1, size=(2, 1, 4, 4)).astype(np.float32)
        saliency = SaliencyMap(values, "counterfactual", "baseline", (0, 2), {"alpha": np.float32(1.0)})
        written = write_saliency_map(store, "maps", 7, saliency, [_trace(0), _trace(2)])
        assert written == ["0007.f32", "0007.pgm", "0007.json",
                           f"{TRACES_DIR}/0007_to0.jsonl", f"{TRACES_DIR}/0007_to2.jsonl"]
        loaded = read_saliency_map(store, "maps", 7)
        np.testing.assert_array_equal(loaded.values, values)
        assert loaded.class_target == (0, 2)
        assert loaded.metadata == {"alpha": 1.0}

    def test_pgm_preview(self, store):
        values = np.zeros((1, 1, 2, 3), dtype=np.float32)
        values[0, 0, 1, 2] = 0.5
        write_saliency_map(store, "maps", 0, SaliencyMap(values, "gradient", "baseline", 1))
        content = store.load_binary_file("maps", "0000.pgm")
        assert content == b"P5\n3 2\n255\n" + bytes([0, 0, 0, 0, 0, 255])

    def test_directory_manifest(self, store):
        for index in (3, 1):
            write_saliency_map(store, "maps", index, SaliencyMap(np.full((2, 1, 4, 4), index), "gradient", "baseline"))
        write_map_manifest(store, "maps", "gradient", "baseline", [1, 3], (2, 1, 4, 4))
        maps = load_saliency_directory(store, "maps")
        assert sorted(maps) == [1, 3]
        assert maps[3].values.max() == 3.0

    def test_external_map_needs_a_shape(self, store):
        store.save_binary_file("ext", "0004.f32", np.zeros(32, dtype="<f4").tobytes())
        with pytest.raises(FileNotFoundError):
            read_saliency_map(store, "ext", 4)
        external = read_saliency_map(store, "ext", 4, shape=(2, 1, 4, 4))
        assert external.method == "external"

    def test_external_map_size_mismatch(self, store):
        store.save_binary_file("ext", "0004.f32", np.zeros(30, dtype="<f4").tobytes())
        with pytest.raises(ValueError, match="expected 32"):
            read_saliency_map(store, "ext", 4, shape=(2, 1, 4, 4))

    def test_scan_ignores_other_names(self, tmp_path):
        store = ArtifactStore(str(tmp_path))
        for name in ("0002.f32", "0010.f32", "notes.f32", "0003.json"):
            store.save_binary_file("", name, b"")
        assert scan_map_files(store, "") == [2, 10]
