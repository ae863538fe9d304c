"""
Per-batch augmentation operators.

Each operator takes a clean batch with hard labels and returns an
AugmentedBatch with soft labels (rows sum to 1) and a provenance record of
the parameters it sampled. All of them are deterministic given the seed and
reduce to the identity at their neutral parameter.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np

from data_pipeline import IMAGE_SIZE, ImageBatch, LabelBatch, channel_mean
from errors import DataError
from numeric_helpers import derive_seed, rng_for
from pydantic_models import AugmentationKind, AugmentationSpec

_CUTOUT_STREAM = 31
_MIXUP_STREAM = 37
_CUTMIX_STREAM = 41
_PIXMIX_STREAM = 43
_PLASMA_STREAM = 47


@dataclass
class AugmentedBatch:
    images: ImageBatch
    labels: np.ndarray  # (B, K) soft labels
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)


def _tag_ids(batch: ImageBatch, operator: str) -> list:
    return [f"{i}+{operator}" for i in batch.ids]


def _partner_offset(rng: np.random.Generator, batch_size: int) -> int:
    """A cyclic shift by 1..B-1 pairs every example with a different one."""
    return int(rng.integers(1, batch_size))


def identity(images: ImageBatch, labels: LabelBatch) -> AugmentedBatch:
    return AugmentedBatch(ImageBatch(images.images.copy(), list(images.ids)), labels.one_hot(), {"operator": "none"})


def cutout(
    images: ImageBatch,
    labels: LabelBatch,
    hole_size: int,
    seed: int,
    fill: Optional[Sequence[float]] = None,
) -> AugmentedBatch:
    """
    Replace one hole_size x hole_size square per image with the fill colour.

    The square always lies fully inside the image. `fill` defaults to the
    batch's per-channel mean.
    """
    if not 0 <= hole_size <= IMAGE_SIZE:
        raise DataError(f"hole_size must lie in [0, {IMAGE_SIZE}], got {hole_size}")
    rng = rng_for(seed, _CUTOUT_STREAM)
    color = np.asarray(fill if fill is not None else channel_mean(images), dtype=np.float64).reshape(3, 1, 1)

    out = images.images.copy()
    corners = []
    for b in range(len(images)):
        top = int(rng.integers(0, IMAGE_SIZE - hole_size + 1))
        left = int(rng.integers(0, IMAGE_SIZE - hole_size + 1))
        corners.append((top, left))
        if hole_size:
            out[b, :, top : top + hole_size, left : left + hole_size] = color
    provenance = {"operator": "cutout", "hole_size": hole_size, "corners": corners}
    return AugmentedBatch(ImageBatch(out, _tag_ids(images, "cutout")), labels.one_hot(), provenance)


def mixup(
    images: ImageBatch,
    labels: LabelBatch,
    beta_alpha: float,
    seed: int,
    lam: Optional[float] = None,
) -> AugmentedBatch:
    """x' = lam * x_i + (1 - lam) * x_j with one lam ~ Beta(alpha, alpha) per batch."""
    if beta_alpha <= 0:
        raise DataError("beta_alpha must be positive")
    if len(images) < 2:
        raise DataError("mixup needs a batch of at least 2 examples")
    rng = rng_for(seed, _MIXUP_STREAM)
    offset = _partner_offset(rng, len(images))
    sampled = float(rng.beta(beta_alpha, beta_alpha))
    lam = sampled if lam is None else float(lam)
    if not 0 <= lam <= 1:
        raise DataError(f"Mixing weight must lie in [0, 1], got {lam}")

    partner = np.roll(np.arange(len(images)), -offset)
    x = images.images
    mixed = lam * x + (1.0 - lam) * x[partner]
    y = labels.one_hot()
    soft = lam * y + (1.0 - lam) * y[partner]
    provenance = {"operator": "mixup", "lam": lam, "partner_offset": offset}
    return AugmentedBatch(ImageBatch(np.clip(mixed, 0.0, 1.0), _tag_ids(images, "mixup")), soft, provenance)


def cutmix(
    images: ImageBatch,
    labels: LabelBatch,
    beta_alpha: float,
    seed: int,
    rho: Optional[float] = None,
) -> AugmentedBatch:
    """
    Paste one square patch of x_j into x_i for the whole batch.

    The target area fraction is 1 - lam with lam ~ Beta(alpha, alpha) unless
    `rho` forces it. The side is rounded to whole pixels and the label weight
    is recomputed from the pasted area, rho = side^2 / 1024.
    """
    if beta_alpha <= 0:
        raise DataError("beta_alpha must be positive")
    if len(images) < 2:
        raise DataError("cutmix needs a batch of at least 2 examples")
    rng = rng_for(seed, _CUTMIX_STREAM)
    offset = _partner_offset(rng, len(images))
    target = 1.0 - float(rng.beta(beta_alpha, beta_alpha)) if rho is None else float(rho)
    if not 0 <= target <= 1:
        raise DataError(f"Patch area fraction must lie in [0, 1], got {target}")

    side = int(round(IMAGE_SIZE * math.sqrt(target)))
    top = int(rng.integers(0, IMAGE_SIZE - side + 1))
    left = int(rng.integers(0, IMAGE_SIZE - side + 1))
    area = side * side / float(IMAGE_SIZE * IMAGE_SIZE)

    partner = np.roll(np.arange(len(images)), -offset)
    out = images.images.copy()
    out[:, :, top : top + side, left : left + side] = images.images[partner, :, top : top + side, left : left + side]
    y = labels.one_hot()
    soft = (1.0 - area) * y + area * y[partner]
    provenance = {"operator": "cutmix", "rho": area, "box": (top, left, side), "partner_offset": offset}
    return AugmentedBatch(ImageBatch(out, _tag_ids(images, "cutmix")), soft, provenance)


def pixmix_style(
    images: ImageBatch,
    labels: LabelBatch,
    mixer_pool: np.ndarray,
    k_max: int,
    beta: float,
    seed: int,
) -> AugmentedBatch:
    """
    Mix each image with k ~ U{0..k_max} plasma fractals.

    Every round picks a mixer from the pool and a weight w ~ Beta(beta, beta),
    then either blends additively, (1 - w) x + w m, or multiplicatively,
    x^(1 - w) m^w. The result is clamped to [0, 1]; labels are untouched.
    """
    if k_max < 0:
        raise DataError("k_max must be >= 0")
    mixer_pool = np.asarray(mixer_pool, dtype=np.float64)
    if k_max > 0 and (mixer_pool.ndim != 3 or mixer_pool.shape[0] == 0):
        raise DataError("pixmix_style needs a nonempty mixer pool of shape (P, 32, 32)")
    rng = rng_for(seed, _PIXMIX_STREAM)

    out = images.images.copy()
    rounds = []
    for b in range(len(images)):
        k = int(rng.integers(0, k_max + 1))
        x = out[b]
        applied = []
        for _ in range(k):
            mixer = mixer_pool[int(rng.integers(mixer_pool.shape[0]))][None, :, :]
            w = float(rng.beta(beta, beta))
            if rng.random() < 0.5:
                x = (1.0 - w) * x + w * mixer
                applied.append(("add", w))
            else:
                x = np.power(x, 1.0 - w) * np.power(mixer, w)
                applied.append(("mul", w))
            x = np.clip(x, 0.0, 1.0)
        out[b] = x
        rounds.append(applied)
    provenance = {"operator": "pixmix_style", "k_max": k_max, "rounds": rounds}
    return AugmentedBatch(ImageBatch(out, _tag_ids(images, "pixmix")), labels.one_hot(), provenance)


# Procedural mixing images


def _diamond_square(exponent: int, roughness: float, rng: np.random.Generator) -> np.ndarray:
    n = 2**exponent + 1
    h = np.zeros((n, n))
    h[:: n - 1, :: n - 1] = rng.uniform(-1.0, 1.0, size=(2, 2))
    step, scale = n - 1, 1.0
    while step > 1:
        half = step // 2
        # diamond step: centre of every square
        corners = (
            h[0 : n - 1 : step, 0 : n - 1 : step]
            + h[0 : n - 1 : step, step::step]
            + h[step::step, 0 : n - 1 : step]
            + h[step::step, step::step]
        )
        h[half::step, half::step] = corners / 4.0 + rng.uniform(-scale, scale, size=corners.shape)

        # square step: edge midpoints, averaging the in-bounds neighbours
        padded = np.pad(h, half, mode="constant", constant_values=np.nan)
        for row_start, col_start in ((half, 0), (0, half)):
            rr, cc = np.meshgrid(np.arange(row_start, n, step), np.arange(col_start, n, step), indexing="ij")
            pr, pc = rr + half, cc + half
            neighbours = np.stack(
                [padded[pr - half, pc], padded[pr + half, pc], padded[pr, pc - half], padded[pr, pc + half]]
            )
            h[rr, cc] = np.nanmean(neighbours, axis=0) + rng.uniform(-scale, scale, size=rr.shape)

        step = half
        scale *= roughness
    return h


def _normalize(field_: np.ndarray) -> np.ndarray:
    low, high = field_.min(), field_.max()
    if high == low:
        return np.zeros_like(field_)
    return (field_ - low) / (high - low)


def plasma_fractal(size: int, roughness: float, seed: int) -> np.ndarray:
    """Diamond-square heightfield of shape (size, size) rescaled to [0, 1]."""
    if size < 2:
        raise DataError("plasma_fractal needs size >= 2")
    if not 0 < roughness <= 1:
        raise DataError(f"roughness must lie in (0, 1], got {roughness}")
    exponent = max(1, math.ceil(math.log2(size - 1)))
    field_ = _diamond_square(exponent, roughness, rng_for(seed, _PLASMA_STREAM))
    return _normalize(field_[:size, :size])


def build_mixer_pool(count: int, roughness: float, seed: int) -> np.ndarray:
    return np.stack([plasma_fractal(IMAGE_SIZE, roughness, derive_seed(seed, _PLASMA_STREAM, i)) for i in range(count)])


# Registry


@dataclass
class AugmentationContext:
    """Dataset-level inputs some operators need."""

    fill: Optional[Sequence[float]] = None
    mixer_pool: Optional[np.ndarray] = None


AugmentationFn = Callable[[ImageBatch, LabelBatch, AugmentationSpec, int, AugmentationContext], AugmentedBatch]


def _run_pixmix(images, labels, spec, seed, context):
    pool = context.mixer_pool
    if pool is None:
        pool = build_mixer_pool(spec.mixer_pool_size, spec.roughness, seed)
    return pixmix_style(images, labels, pool, spec.k_max, spec.beta, seed)


AUGMENTATIONS: Dict[AugmentationKind, AugmentationFn] = {
    AugmentationKind.none: lambda images, labels, spec, seed, context: identity(images, labels),
    AugmentationKind.cutout: lambda images, labels, spec, seed, context: cutout(
        images, labels, spec.hole_size, seed, fill=context.fill
    ),
    AugmentationKind.mixup: lambda images, labels, spec, seed, context: mixup(images, labels, spec.beta_alpha, seed),
    AugmentationKind.cutmix: lambda images, labels, spec, seed, context: cutmix(images, labels, spec.beta_alpha, seed),
    AugmentationKind.pixmix_style: _run_pixmix,
}


def apply_augmentation(
    images: ImageBatch,
    labels: LabelBatch,
    spec: AugmentationSpec,
    seed: int,
    context: Optional[AugmentationContext] = None,
) -> AugmentedBatch:
    return AUGMENTATIONS[spec.kind](images, labels, spec, seed, context or AugmentationContext())
