import json
import math

import numpy as np
import pytest
from sklearn.neighbors import NearestCentroid

from data_pipeline import (
    RECORD_BYTES,
    SEVERITY_TABLE,
    ImageBatch,
    LabelBatch,
    build_eval_bundle,
    cifar10_bytes,
    corrupt,
    load_dataset,
    parse_cifar10,
    perturb_sequence,
    persist_eval_bundle,
    split_dataset,
    synth_dataset,
    synth_ood,
    write_cifar10,
)
from errors import DataError, DataFormatError
from pydantic_models import CorruptionKind, DatasetSource, DatasetSpec, MetricSettings, PerturbationKind


def test_parse_cifar10_records(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(3, 3, 32, 32))
    labels = np.array([0, 9, 4])
    path = tmp_path / "data_batch_1.bin"
    write_cifar10(path, pixels / 255.0, labels)
    assert path.stat().st_size == 3 * RECORD_BYTES

    images, parsed = parse_cifar10(path)
    np.testing.assert_array_equal(parsed.labels, labels)
    np.testing.assert_allclose(images.images * 255.0, pixels)
    assert images.ids == ["data_batch_1:0", "data_batch_1:1", "data_batch_1:2"]


def test_parse_cifar10_rejects_bad_length_and_labels(tmp_path):
    short = tmp_path / "short.bin"
    short.write_bytes(b"\x00" * (RECORD_BYTES - 1))
    with pytest.raises(DataFormatError):
        parse_cifar10(short)

    bad_label = tmp_path / "bad.bin"
    blob = bytearray(cifar10_bytes(np.zeros((1, 3, 32, 32)), np.array([0])))
    blob[0] = 10
    bad_label.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError):
        parse_cifar10(bad_label)

    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    with pytest.raises(DataFormatError):
        parse_cifar10(empty)


def test_image_batch_validates_shape():
    with pytest.raises(DataFormatError):
        ImageBatch(np.zeros((2, 3, 16, 16)), ["a", "b"])
    with pytest.raises(DataFormatError):
        LabelBatch(np.array([0, 3]), num_classes=3)


def test_synth_dataset_is_balanced_and_deterministic():
    images, labels = synth_dataset(num_classes=4, per_class=3, seed=1)
    again, _ = synth_dataset(num_classes=4, per_class=3, seed=1)
    assert images.images.shape == (12, 3, 32, 32)
    assert np.bincount(labels.labels).tolist() == [3, 3, 3, 3]
    assert images.images.min() >= 0 and images.images.max() <= 1
    np.testing.assert_array_equal(images.images, again.images)
    with pytest.raises(DataError):
        synth_dataset(num_classes=1, per_class=3, seed=1)


@pytest.mark.parametrize("kind", list(CorruptionKind))
def test_corruptions_stay_in_range_and_are_seeded(kind, synth_data):
    images, _ = synth_data
    a = corrupt(images, kind, 2, seed=3)
    b = corrupt(images, kind, 2, seed=3)
    assert a.images.shape == images.images.shape
    assert a.images.min() >= 0 and a.images.max() <= 1
    np.testing.assert_array_equal(a.images, b.images)
    assert a.ids[0].endswith(f"|{kind.value}@2")


def test_gaussian_noise_deviation_is_a_folded_normal():
    clean = ImageBatch(np.full((8, 3, 32, 32), 0.5), [str(i) for i in range(8)])
    noisy = corrupt(clean, CorruptionKind.gaussian_noise, 1, seed=0)
    sigma = SEVERITY_TABLE[CorruptionKind.gaussian_noise][0]
    assert sigma == 0.04
    assert np.abs(noisy.images - 0.5).mean() == pytest.approx(sigma * math.sqrt(2 / math.pi), rel=0.1)


@pytest.mark.parametrize("kind", list(CorruptionKind))
def test_deviation_grows_with_severity(kind, synth_data):
    images, _ = synth_data
    deviations = [np.abs(corrupt(images, kind, s, seed=0).images - images.images).mean() for s in (1, 2, 3)]
    assert deviations[0] < deviations[1] < deviations[2], deviations


def test_synthetic_classes_are_learnable_by_nearest_centroid():
    train_images, train_labels = synth_dataset(num_classes=10, per_class=20, seed=0)
    test_images, test_labels = synth_dataset(num_classes=10, per_class=10, seed=1)
    probe = NearestCentroid().fit(train_images.images.reshape(200, -1), train_labels.labels)
    accuracy = (probe.predict(test_images.images.reshape(100, -1)) == test_labels.labels).mean()
    assert accuracy > 2 / 10


def test_severity_table_covers_every_kind():
    assert set(SEVERITY_TABLE) == set(CorruptionKind)


def test_corrupt_rejects_unknown_kind_and_severity(synth_data):
    images, _ = synth_data
    with pytest.raises(DataError):
        corrupt(images, "fog", 1, seed=0)
    with pytest.raises(DataError):
        corrupt(images, CorruptionKind.brightness, 4, seed=0)


def test_brightness_is_an_exact_shift():
    clean = ImageBatch(np.full((1, 3, 32, 32), 0.5), ["x"])
    np.testing.assert_allclose(corrupt(clean, CorruptionKind.brightness, 1, seed=0).images, 0.6)


def test_noise_sequence_starts_clean_and_grows():
    image = np.full((3, 32, 32), 0.5)
    seq = perturb_sequence(image, PerturbationKind.noise, length=5, seed=0)
    np.testing.assert_array_equal(seq.frames[0], image)
    assert seq.magnitudes == pytest.approx([0.0, 0.015, 0.03, 0.045, 0.06])
    deviations = [np.abs(frame - image).mean() for frame in seq.frames]
    assert deviations == sorted(deviations)


def test_translation_sequence_shifts_monotonically():
    image = np.random.default_rng(0).random((3, 32, 32))
    seq = perturb_sequence(image, "translation", length=8, seed=0, magnitude=4)
    assert seq.magnitudes == [0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]
    np.testing.assert_array_equal(seq.frames[0], image)
    with pytest.raises(DataError):
        perturb_sequence(image, "translation", length=1, seed=0)


def test_split_is_disjoint(synth_data):
    images, labels = synth_data
    train_x, _, test_x, _ = split_dataset(images, labels, train_size=10, test_size=8, seed=0)
    assert not set(train_x.ids) & set(test_x.ids)
    with pytest.raises(DataError):
        split_dataset(images, labels, train_size=15, test_size=8, seed=0)


def test_load_dataset_falls_back_to_synthetic(tmp_path, caplog):
    spec = DatasetSpec(
        source=DatasetSource.cifar10, path=str(tmp_path / "missing"), num_classes=10, per_class=3, train_size=20, test_size=10
    )
    splits = load_dataset(spec, seed=0)
    assert splits.manifest["source"] == "synthetic"
    assert len(splits.train_images) == 20 and len(splits.test_images) == 10
    assert "falling back" in caplog.text

    strict = spec.model_copy(update={"allow_synthetic_fallback": False})
    with pytest.raises(DataError):
        load_dataset(strict, seed=0)


def test_load_dataset_reads_cifar10_directory(tmp_path):
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        write_cifar10(tmp_path / name, rng.random((4, 3, 32, 32)), rng.integers(0, 10, size=4))
    spec = DatasetSpec(source=DatasetSource.cifar10, path=str(tmp_path), train_size=12, test_size=3)
    splits = load_dataset(spec, seed=0)
    assert splits.manifest["source"] == "cifar10"
    assert len(splits.train_images) == 12 and len(splits.test_images) == 3


def test_ood_images_are_deterministic():
    a = synth_ood(6, seed=2)
    np.testing.assert_array_equal(a.images, synth_ood(6, seed=2).images)
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_eval_bundle_persists_as_records(tmp_path, synth_data):
    images, labels = synth_data
    metrics = MetricSettings(
        eval_size=6, corruption_kinds=["contrast"], severities=[1, 3], num_sequences=2, sequence_length=3, ood_count=3
    )
    bundle = build_eval_bundle(images, labels, metrics, seed=0)
    assert len(bundle.clean) == 6
    assert [(c.kind.value, c.severity) for c in bundle.corruption_sets] == [("contrast", 1), ("contrast", 3)]
    assert [s.kind for s in bundle.sequences] == [PerturbationKind.noise, PerturbationKind.translation]

    written = persist_eval_bundle(bundle, tmp_path)
    assert [p.name for p in written] == ["clean.bin", "contrast_s1.bin", "contrast_s3.bin", "ood.bin"]
    reread, reread_labels = parse_cifar10(tmp_path / "contrast_s3.bin")
    np.testing.assert_array_equal(reread_labels.labels, bundle.labels.labels)
    assert json.loads((tmp_path / "ood.json").read_text())["out_of_distribution"] is True
