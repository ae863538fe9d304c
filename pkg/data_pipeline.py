"""
Dataset ingestion and deterministic evaluation-set generation.

Clean data comes from the CIFAR-10 binary files when they are available and
from procedurally rendered shapes otherwise. Every generated set (corruptions,
perturbation sequences, out-of-distribution images) is a pure function of its
inputs and seed, and can be persisted in the CIFAR-10 record format plus a
JSON manifest.

Corruption severity table (severity 1 / 2 / 3):

    gaussian_noise   additive N(0, sigma^2), sigma      0.04 / 0.08 / 0.12
    shot_noise       Poisson(x * scale) / scale          60 / 25 / 12
    impulse_noise    salt-and-pepper pixel fraction      0.01 / 0.03 / 0.06
    box_blur         (2r+1)^2 mean filter, radius r      1 / 2 / 3
    brightness       x + delta                           0.1 / 0.2 / 0.3
    contrast         (x - mean) * factor + mean          0.75 / 0.5 / 0.3
    pixelate         block average, block size           2 / 4 / 8
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import uniform_filter

from errors import DataError, DataFormatError
from numeric_helpers import canonical_json, rng_for
from pydantic_models import CorruptionKind, DatasetSource, DatasetSpec, MetricSettings, PerturbationKind

logger = logging.getLogger(__name__)

IMAGE_SIZE = 32
IMAGE_BYTES = 3 * IMAGE_SIZE * IMAGE_SIZE
RECORD_BYTES = 1 + IMAGE_BYTES
CIFAR10_CLASSES = 10
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"

SEVERITY_TABLE: Dict[CorruptionKind, Tuple[float, float, float]] = {
    CorruptionKind.gaussian_noise: (0.04, 0.08, 0.12),
    CorruptionKind.shot_noise: (60.0, 25.0, 12.0),
    CorruptionKind.impulse_noise: (0.01, 0.03, 0.06),
    CorruptionKind.box_blur: (1, 2, 3),
    CorruptionKind.brightness: (0.1, 0.2, 0.3),
    CorruptionKind.contrast: (0.75, 0.5, 0.3),
    CorruptionKind.pixelate: (2, 4, 8),
}

# Random-stream keys, one per generator family
_SYNTH_STREAM = 7
_CORRUPT_STREAM = 11
_SEQUENCE_STREAM = 13
_OOD_STREAM = 17
_SPLIT_STREAM = 19


@dataclass
class ImageBatch:
    images: np.ndarray
    ids: List[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise DataFormatError(f"Images must have shape (B, 3, 32, 32), got {self.images.shape}")
        if len(self.ids) != self.images.shape[0]:
            raise DataFormatError(f"{len(self.ids)} ids for {self.images.shape[0]} images")

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, indices: Sequence[int]) -> "ImageBatch":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageBatch(self.images[indices], [self.ids[i] for i in indices])


@dataclass
class LabelBatch:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise DataFormatError(f"Labels must be one-dimensional, got shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"Label out of range for {self.num_classes} classes")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, indices: Sequence[int]) -> "LabelBatch":
        return LabelBatch(self.labels[np.asarray(indices, dtype=np.int64)], self.num_classes)

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self), self.num_classes))
        out[np.arange(len(self)), self.labels] = 1.0
        return out


@dataclass
class CorruptionSet:
    kind: CorruptionKind
    severity: int
    seed: int
    images: ImageBatch
    labels: LabelBatch


@dataclass
class PerturbationSequence:
    base_id: str
    kind: PerturbationKind
    frames: np.ndarray  # (T, 3, 32, 32)
    magnitudes: List[float]

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class DatasetSplits:
    train_images: ImageBatch
    train_labels: LabelBatch
    test_images: ImageBatch
    test_labels: LabelBatch
    manifest: Dict[str, object] = field(default_factory=dict)


# CIFAR-10 binary records


def parse_cifar10(path: Union[str, Path]) -> Tuple[ImageBatch, LabelBatch]:
    """
    Parse a CIFAR-10 binary batch file.

    Args:
        path: File made of 3073-byte records (label byte, then R, G and B planes)

    Returns:
        Images scaled to [0, 1] and their labels

    Raises:
        DataFormatError: If the length is not a whole number of records or a
            label byte is above 9
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    if not raw or len(raw) % RECORD_BYTES:
        raise DataFormatError(f"{path.name}: length {len(raw)} is not a positive multiple of {RECORD_BYTES}")

    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR10_CLASSES:
        bad = int(np.argmax(labels >= CIFAR10_CLASSES))
        raise DataFormatError(f"{path.name}: record {bad} has label byte {labels[bad]}")
    images = records[:, 1:].reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE).astype(np.float64) / 255.0
    ids = [f"{path.stem}:{i}" for i in range(len(labels))]
    return ImageBatch(images, ids), LabelBatch(labels, CIFAR10_CLASSES)


def cifar10_bytes(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Encode images in [0, 1] as CIFAR-10 records, quantizing pixels to 1/255 steps."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise DataFormatError("Labels must fit in one byte")
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).reshape(images.shape[0], IMAGE_BYTES)
    return np.concatenate([labels.astype(np.uint8)[:, None], pixels], axis=1).tobytes()


def write_cifar10(path: Union[str, Path], images: np.ndarray, labels: np.ndarray) -> None:
    Path(path).write_bytes(cifar10_bytes(images, labels))


def load_cifar10_dir(directory: Union[str, Path]) -> Tuple[ImageBatch, LabelBatch, ImageBatch, LabelBatch]:
    directory = Path(directory)
    missing = [name for name in (*CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILE) if not (directory / name).is_file()]
    if missing:
        raise DataError(f"CIFAR-10 files missing from {directory}: {', '.join(missing)}")

    parts = [parse_cifar10(directory / name) for name in CIFAR10_TRAIN_FILES]
    train_images = ImageBatch(
        np.concatenate([p[0].images for p in parts]), [i for p in parts for i in p[0].ids]
    )
    train_labels = LabelBatch(np.concatenate([p[1].labels for p in parts]), CIFAR10_CLASSES)
    test_images, test_labels = parse_cifar10(directory / CIFAR10_TEST_FILE)
    return train_images, train_labels, test_images, test_labels


# Synthetic in-distribution data


def _hue_to_rgb(hue: float, saturation: float, value: float) -> np.ndarray:
    pure = np.clip(np.abs((hue * 6.0 + np.array([0.0, 4.0, 2.0])) % 6.0 - 3.0) - 1.0, 0.0, 1.0)
    return value * (1.0 - saturation + saturation * pure)


def _shape_mask(shape_index: int, dy: np.ndarray, dx: np.ndarray, radius: float) -> np.ndarray:
    dist = np.sqrt(dy**2 + dx**2)
    if shape_index == 0:  # disc
        return dist <= radius
    if shape_index == 1:  # square
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * radius
    if shape_index == 2:  # triangle
        return (dy <= 0.7 * radius) & (np.abs(dx) <= 0.6 * (dy + radius))
    if shape_index == 3:  # ring
        return (dist <= radius) & (dist >= 0.55 * radius)
    # cross
    thin = 0.3 * radius
    return ((np.abs(dx) <= thin) & (np.abs(dy) <= radius)) | ((np.abs(dy) <= thin) & (np.abs(dx) <= radius))


_NUM_SHAPES = 5


def _textured_background(rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.25, 0.55)
    tint = rng.uniform(-0.04, 0.04, size=(3, 1, 1))
    coarse = rng.normal(0.0, 0.05, size=(3, IMAGE_SIZE // 4, IMAGE_SIZE // 4))
    texture = np.kron(coarse, np.ones((4, 4)))
    return base + tint + texture


def render_shape_image(class_index: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """One 3x32x32 image of the class's shape in the class colour over a textured background."""
    coords = np.arange(IMAGE_SIZE, dtype=np.float64)
    center_y, center_x = 15.5 + rng.uniform(-4, 4, size=2)
    dy = coords[:, None] - center_y
    dx = coords[None, :] - center_x
    radius = rng.uniform(7.0, 11.0)
    mask = _shape_mask(class_index % _NUM_SHAPES, dy, dx, radius)

    color = _hue_to_rgb(class_index / num_classes, 0.85, rng.uniform(0.8, 1.0))
    image = _textured_background(rng)
    image = np.where(mask[None, :, :], color[:, None, None], image)
    return np.clip(image, 0.0, 1.0)


def synth_dataset(num_classes: int, per_class: int, seed: int) -> Tuple[ImageBatch, LabelBatch]:
    """
    Render a class-balanced synthetic dataset.

    Class k is drawn as shape (k mod 5) in hue k / num_classes; position,
    size, brightness and background texture are jittered per image.
    """
    if num_classes < 2:
        raise DataError("synth_dataset needs at least 2 classes")
    if per_class < 1:
        raise DataError("synth_dataset needs per_class >= 1")

    images = np.empty((num_classes * per_class, 3, IMAGE_SIZE, IMAGE_SIZE))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    ids = []
    for k in range(num_classes):
        for i in range(per_class):
            images[k * per_class + i] = render_shape_image(k, num_classes, rng_for(seed, _SYNTH_STREAM, k, i))
            ids.append(f"synth-{seed}:{k}:{i}")
    return ImageBatch(images, ids), LabelBatch(labels, num_classes)


# Corruptions


def _severity_value(kind: CorruptionKind, severity: int) -> float:
    if severity not in (1, 2, 3):
        raise DataError(f"Severity must be 1, 2 or 3, got {severity}")
    return SEVERITY_TABLE[kind][severity - 1]


def corrupt(clean: ImageBatch, kind: Union[CorruptionKind, str], severity: int, seed: int) -> ImageBatch:
    """Apply one corruption at one severity; the output stays in [0, 1]."""
    try:
        kind = CorruptionKind(kind)
    except ValueError:
        raise DataError(f"Unknown corruption kind {kind!r}") from None
    level = _severity_value(kind, severity)
    rng = rng_for(seed, _CORRUPT_STREAM, list(CorruptionKind).index(kind), severity)
    x = clean.images

    if kind is CorruptionKind.gaussian_noise:
        out = x + rng.normal(0.0, level, size=x.shape)
    elif kind is CorruptionKind.shot_noise:
        out = rng.poisson(x * level) / level
    elif kind is CorruptionKind.impulse_noise:
        hit = rng.random(x.shape) < level
        salt = rng.random(x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float64), x)
    elif kind is CorruptionKind.box_blur:
        size = 2 * int(level) + 1
        out = uniform_filter(x, size=(1, 1, size, size), mode="nearest")
    elif kind is CorruptionKind.brightness:
        out = x + level
    elif kind is CorruptionKind.contrast:
        means = x.mean(axis=(1, 2, 3), keepdims=True)
        out = (x - means) * level + means
    else:
        block = int(level)
        b, c = x.shape[:2]
        coarse = x.reshape(b, c, IMAGE_SIZE // block, block, IMAGE_SIZE // block, block).mean(axis=(3, 5))
        out = np.repeat(np.repeat(coarse, block, axis=2), block, axis=3)

    ids = [f"{i}|{kind.value}@{severity}" for i in clean.ids]
    return ImageBatch(np.clip(out, 0.0, 1.0), ids)


def build_corruption_sets(
    clean: ImageBatch,
    labels: LabelBatch,
    kinds: Sequence[CorruptionKind],
    severities: Sequence[int],
    seed: int,
) -> List[CorruptionSet]:
    return [
        CorruptionSet(kind=CorruptionKind(kind), severity=s, seed=seed, images=corrupt(clean, kind, s, seed), labels=labels)
        for kind in kinds
        for s in severities
    ]


# Perturbation sequences


def _shift_image(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate a (3, H, W) image by (dy, dx) pixels, filling with edge values."""
    if dy == 0 and dx == 0:
        return image.copy()
    pad_y, pad_x = abs(dy), abs(dx)
    padded = np.pad(image, ((0, 0), (pad_y, pad_y), (pad_x, pad_x)), mode="edge")
    top = pad_y - dy
    left = pad_x - dx
    return padded[:, top : top + IMAGE_SIZE, left : left + IMAGE_SIZE].copy()


_DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))


def perturb_sequence(
    image: np.ndarray,
    kind: Union[PerturbationKind, str],
    length: int,
    seed: int,
    magnitude: Optional[float] = None,
    base_id: str = "",
) -> PerturbationSequence:
    """
    Build a sequence of `length` frames under a nondecreasing perturbation.

    For noise, frame t adds sigma_t times one fixed noise field, with sigma_t
    on the grid {0, m/(T-1), ..., m} and m the maximum sigma (default 0.06).
    For translation, frame t is shifted by floor(t * m / T) pixels in one
    seeded direction with edge padding, m the maximum shift (default 4).
    """
    if length < 2:
        raise DataError(f"Perturbation sequences need at least 2 frames, got {length}")
    kind = PerturbationKind(kind)
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise DataFormatError(f"Expected a (3, 32, 32) image, got {image.shape}")
    rng = rng_for(seed, _SEQUENCE_STREAM, list(PerturbationKind).index(kind))

    frames = np.empty((length, 3, IMAGE_SIZE, IMAGE_SIZE))
    if kind is PerturbationKind.noise:
        sigma_max = 0.06 if magnitude is None else float(magnitude)
        magnitudes = [float(s) for s in np.linspace(0.0, sigma_max, length)]
        noise = rng.normal(size=image.shape)
        for t, sigma in enumerate(magnitudes):
            frames[t] = image if sigma == 0 else np.clip(image + sigma * noise, 0.0, 1.0)
    else:
        max_shift = 4 if magnitude is None else int(magnitude)
        dy, dx = _DIRECTIONS[int(rng.integers(len(_DIRECTIONS)))]
        magnitudes = []
        for t in range(length):
            shift = (t * max_shift) // length
            magnitudes.append(float(shift))
            frames[t] = _shift_image(image, dy * shift, dx * shift)
    return PerturbationSequence(base_id=base_id, kind=kind, frames=frames, magnitudes=magnitudes)


# Out-of-distribution images


def _noise_field(rng: np.random.Generator) -> np.ndarray:
    return rng.random((3, IMAGE_SIZE, IMAGE_SIZE))


def _stripes(rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 10.0)
    coords = np.arange(IMAGE_SIZE, dtype=np.float64)
    phase = coords[:, None] * np.sin(angle) + coords[None, :] * np.cos(angle)
    on = np.sin(2 * np.pi * phase / period) > 0
    a, b = rng.random(3), rng.random(3)
    return np.where(on[None], a[:, None, None], b[:, None, None])


def _checkerboard(rng: np.random.Generator) -> np.ndarray:
    cell = int(rng.integers(2, 9))
    coords = np.arange(IMAGE_SIZE)
    on = ((coords[:, None] // cell) + (coords[None, :] // cell)) % 2 == 0
    a, b = rng.random(3), rng.random(3)
    return np.where(on[None], a[:, None, None], b[:, None, None])


_OOD_GENERATORS = (_noise_field, _stripes, _checkerboard)


def synth_ood(count: int, seed: int) -> ImageBatch:
    """Noise fields, stripe gratings and checkerboards; none of them is a synth_dataset class."""
    if count < 1:
        raise DataError("synth_ood needs count >= 1")
    images = np.empty((count, 3, IMAGE_SIZE, IMAGE_SIZE))
    ids = []
    for i in range(count):
        generator = _OOD_GENERATORS[i % len(_OOD_GENERATORS)]
        images[i] = generator(rng_for(seed, _OOD_STREAM, i))
        ids.append(f"ood-{seed}:{generator.__name__.lstrip('_')}:{i}")
    return ImageBatch(images, ids)


# Splits and normalization


def subsample(images: ImageBatch, labels: LabelBatch, size: int, seed: int, stream: int = 0) -> Tuple[ImageBatch, LabelBatch]:
    if size > len(images):
        raise DataError(f"Requested {size} examples but only {len(images)} are available")
    order = np.sort(rng_for(seed, _SPLIT_STREAM, stream).permutation(len(images))[:size])
    return images.take(order), labels.take(order)


def split_dataset(
    images: ImageBatch, labels: LabelBatch, train_size: int, test_size: int, seed: int
) -> Tuple[ImageBatch, LabelBatch, ImageBatch, LabelBatch]:
    """Seeded disjoint train/test split of one pool of examples."""
    if train_size + test_size > len(images):
        raise DataError(f"Split of {train_size}+{test_size} exceeds the {len(images)} available examples")
    order = rng_for(seed, _SPLIT_STREAM).permutation(len(images))
    test_idx = np.sort(order[:test_size])
    train_idx = np.sort(order[test_size : test_size + train_size])
    return images.take(train_idx), labels.take(train_idx), images.take(test_idx), labels.take(test_idx)


def channel_mean(images: ImageBatch) -> Tuple[float, float, float]:
    return tuple(float(v) for v in images.images.mean(axis=(0, 2, 3)))


def channel_std(images: ImageBatch) -> Tuple[float, float, float]:
    return tuple(float(max(v, 1e-6)) for v in images.images.std(axis=(0, 2, 3)))


def load_dataset(spec: DatasetSpec, seed: int, cifar10_dir: Optional[str] = None) -> DatasetSplits:
    """
    Load the configured dataset and cut it to the configured split sizes.

    Args:
        spec: Dataset block of the experiment config
        seed: Experiment seed, used for the synthetic render and subsampling
        cifar10_dir: Fallback CIFAR-10 location when spec.path is unset

    Returns:
        Train and test batches plus a manifest describing their provenance

    Raises:
        DataError: If CIFAR-10 is requested, absent and fallback is disabled
    """
    if spec.source is DatasetSource.cifar10:
        directory = spec.path or cifar10_dir
        if directory and Path(directory).is_dir():
            train_pool, train_pool_labels, test_pool, test_pool_labels = load_cifar10_dir(directory)
            train_images, train_labels = subsample(train_pool, train_pool_labels, spec.train_size, seed, stream=1)
            test_images, test_labels = subsample(test_pool, test_pool_labels, spec.test_size, seed, stream=2)
            manifest = {
                "source": "cifar10",
                "train_size": spec.train_size,
                "test_size": spec.test_size,
                "seed": seed,
            }
            return DatasetSplits(train_images, train_labels, test_images, test_labels, manifest)
        if not spec.allow_synthetic_fallback:
            raise DataError(f"CIFAR-10 directory not found: {directory!r}")
        logger.warning(f"CIFAR-10 directory {directory!r} not found, falling back to synthetic data")

    per_class = max(spec.per_class, -(-(spec.train_size + spec.test_size) // spec.num_classes))
    pool, pool_labels = synth_dataset(spec.num_classes, per_class, seed)
    train_images, train_labels, test_images, test_labels = split_dataset(
        pool, pool_labels, spec.train_size, spec.test_size, seed
    )
    manifest = {
        "source": "synthetic",
        "num_classes": spec.num_classes,
        "per_class": per_class,
        "train_size": spec.train_size,
        "test_size": spec.test_size,
        "seed": seed,
    }
    return DatasetSplits(train_images, train_labels, test_images, test_labels, manifest)


# Evaluation bundle


@dataclass
class EvalBundle:
    clean: ImageBatch
    labels: LabelBatch
    corruption_sets: List[CorruptionSet]
    sequences: List[PerturbationSequence]
    ood: ImageBatch
    manifest: Dict[str, object]


def build_eval_bundle(test_images: ImageBatch, test_labels: LabelBatch, metrics: MetricSettings, seed: int) -> EvalBundle:
    """Generate every evaluation set the safety report needs from the held-out split."""
    size = min(metrics.eval_size, len(test_images))
    clean, labels = subsample(test_images, test_labels, size, seed, stream=3)
    corruption_sets = build_corruption_sets(clean, labels, metrics.corruption_kinds, metrics.severities, seed)

    kinds = list(PerturbationKind)
    sequences = []
    for i in range(min(metrics.num_sequences, size)):
        kind = kinds[i % len(kinds)]
        magnitude = metrics.noise_sigma_max if kind is PerturbationKind.noise else metrics.max_shift
        sequences.append(
            perturb_sequence(
                clean.images[i], kind, metrics.sequence_length, seed + i, magnitude=magnitude, base_id=clean.ids[i]
            )
        )

    ood = synth_ood(metrics.ood_count, seed)
    manifest = {
        "seed": seed,
        "clean_size": size,
        "corruptions": [{"kind": c.kind.value, "severity": c.severity} for c in corruption_sets],
        "severity_table": {kind.value: list(values) for kind, values in SEVERITY_TABLE.items()},
        "sequences": {
            "count": len(sequences),
            "length": metrics.sequence_length,
            "noise_sigma_max": metrics.noise_sigma_max,
            "max_shift": metrics.max_shift,
        },
        "ood_count": metrics.ood_count,
    }
    return EvalBundle(clean, labels, corruption_sets, sequences, ood, manifest)


def save_generated_set(
    directory: Union[str, Path], name: str, images: ImageBatch, labels: np.ndarray, manifest: Dict[str, object]
) -> Path:
    """Persist a generated set as CIFAR-10 records plus a `<name>.json` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / f"{name}.bin"
    write_cifar10(target, images.images, labels)
    (directory / f"{name}.json").write_text(canonical_json({**manifest, "count": len(images)}))
    return target


def persist_eval_bundle(bundle: EvalBundle, directory: Union[str, Path]) -> List[Path]:
    written = [save_generated_set(directory, "clean", bundle.clean, bundle.labels.labels, {"kind": "clean"})]
    for cset in bundle.corruption_sets:
        written.append(
            save_generated_set(
                directory,
                f"{cset.kind.value}_s{cset.severity}",
                cset.images,
                cset.labels.labels,
                {"kind": cset.kind.value, "severity": cset.severity, "seed": cset.seed},
            )
        )
    # OOD images carry no class; label byte 0 plus the manifest flag marks them
    written.append(
        save_generated_set(
            directory, "ood", bundle.ood, np.zeros(len(bundle.ood), dtype=np.int64), {"kind": "ood", "out_of_distribution": True}
        )
    )
    (Path(directory) / "manifest.json").write_text(json.dumps(bundle.manifest, indent=2, sort_keys=True))
    return written
