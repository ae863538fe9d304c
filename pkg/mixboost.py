"""
Mask-boosted training.

Each step augments a batch, masks a random subset of patches in every
augmented image, runs the model on both versions and minimizes

    cross_entropy(labels, logits) - lambda * boost_loss(logits, masked_logits)

where boost_loss is the entropy of softmax(logits - masked_logits). The
entropy is largest when the masked and unmasked predictions differ only by
a constant, so subtracting it pulls the two predictions together.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from augmentations import AugmentationContext, apply_augmentation, build_mixer_pool
from autodiff import Tensor, log_softmax
from data_pipeline import ImageBatch, LabelBatch, channel_mean, channel_std
from errors import LabError, NumericError, ShapeError
from numeric_helpers import derive_seed, rng_for
from pydantic_models import (
    ArchitectureSpec,
    AugmentationKind,
    ExperimentConfig,
    GridRow,
    MaskSpec,
    TrainConfig,
    TrainingLogRecord,
)
from tiny_cnn import MomentumSgd, SgdSchedule, TinyCnn, backward, cross_entropy, forward

logger = logging.getLogger(__name__)

_SHUFFLE_STREAM = 53
_AUGMENT_STREAM = 59
_MASK_STREAM = 61
_INIT_STREAM = 67
_MIXER_STREAM = 71


@dataclass
class MaskRealization:
    """Boolean patch grid; True marks a masked patch."""

    grid: np.ndarray

    @property
    def num_masked(self) -> int:
        return int(self.grid.sum())


def _choose_patches(spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    grid = np.zeros(spec.num_patches, dtype=bool)
    grid[rng.choice(spec.num_patches, size=spec.num_masked, replace=False)] = True
    return grid.reshape(spec.rows, spec.cols)


def sample_mask(spec: MaskSpec, seed: int) -> MaskRealization:
    """Mask exactly round(r1 * rows * cols) patches, chosen without replacement."""
    return MaskRealization(_choose_patches(spec, rng_for(seed, _MASK_STREAM)))


def sample_masks(spec: MaskSpec, count: int, rng: np.random.Generator) -> MaskRealization:
    """One independent mask per image, stacked into a (count, rows, cols) grid."""
    return MaskRealization(np.stack([_choose_patches(spec, rng) for _ in range(count)]))


def apply_mask(
    images: Union[ImageBatch, np.ndarray], mask: MaskRealization, fill: Sequence[float]
) -> np.ndarray:
    """
    Replace masked patches with the fill colour; unmasked pixels are copied
    unchanged. A (rows, cols) mask applies to every image, a (B, rows, cols)
    mask gives one grid per image.
    """
    x = images.images if isinstance(images, ImageBatch) else np.asarray(images, dtype=np.float64)
    batch, _, height, width = x.shape
    grid = mask.grid if mask.grid.ndim == 3 else np.broadcast_to(mask.grid, (batch, *mask.grid.shape))
    if grid.shape[0] != batch:
        raise ShapeError(f"Got {grid.shape[0]} masks for {batch} images")
    rows, cols = grid.shape[1:]
    if height % rows or width % cols:
        raise ShapeError(f"A {rows}x{cols} patch grid does not tile a {height}x{width} image")

    pixel_mask = np.repeat(np.repeat(grid, height // rows, axis=1), width // cols, axis=2)
    color = np.asarray(fill, dtype=np.float64).reshape(1, 3, 1, 1)
    return np.where(pixel_mask[:, None, :, :], color, x)


def boost_loss(logits: Tensor, masked_logits: Tensor) -> Tensor:
    """Batch mean of the entropy of softmax(logits - masked_logits); lies in [0, ln K]."""
    if logits.shape != masked_logits.shape or len(logits.shape) != 2:
        raise ShapeError(f"boost_loss needs two (B, K) tensors, got {logits.shape} and {masked_logits.shape}")
    log_p = log_softmax(logits - masked_logits)
    return -((log_p.exp() * log_p).sum(axis=1).mean())


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    l_boost: float


def total_loss(
    labels: np.ndarray,
    logits: Tensor,
    masked_logits: Optional[Tensor],
    r1: float,
    lam: float,
) -> LossBreakdown:
    """
    cross_entropy(logits, labels) - lam * boost_loss(logits, masked_logits).

    r1 only shaped `masked_logits`; it is accepted so the loss records the
    setting it was computed under. With lam == 0 the masked pass may be
    omitted and the result is plain cross-entropy.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    ce = cross_entropy(logits, labels)
    if lam == 0:
        return LossBreakdown(total=ce, ce=ce.item(), l_boost=0.0)
    if masked_logits is None:
        raise ValueError(f"lambda={lam} at r1={r1} needs masked logits")
    boost = boost_loss(logits, masked_logits)
    return LossBreakdown(total=ce - boost * lam, ce=ce.item(), l_boost=boost.item())


@dataclass
class TrainResult:
    model: TinyCnn
    log: List[TrainingLogRecord]
    metadata: Dict[str, object] = field(default_factory=dict)


def _num_batches(num_examples: int, batch_size: int) -> int:
    return max(1, num_examples // batch_size)


def _batches(num_examples: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(num_examples)
    if num_examples <= batch_size:
        return [order]
    # the trailing partial batch is dropped so mixing operators always get full batches
    return [order[i : i + batch_size] for i in range(0, num_examples - batch_size + 1, batch_size)]


def train(
    config: TrainConfig,
    architecture: ArchitectureSpec,
    images: ImageBatch,
    labels: LabelBatch,
    show_progress: bool = False,
    on_epoch: Optional[Callable[[TrainingLogRecord], None]] = None,
) -> TrainResult:
    """
    Train a TinyCnn with optional mask boosting.

    Args:
        config: Training hyperparameters including r1, lambda and the augmentation
        architecture: Layer widths and class count; input normalization is
            replaced by statistics measured on `images`
        images: Training images in [0, 1]
        labels: Hard training labels
        show_progress: Draw a tqdm bar over epochs
        on_epoch: Called with each epoch's log record as soon as it is complete

    Returns:
        The trained model, one log record per epoch and run metadata

    Raises:
        NumericError: If a loss or logit becomes non-finite
    """
    if len(images) < 2:
        raise LabError("Training needs at least 2 examples")
    if labels.num_classes != architecture.num_classes:
        raise ShapeError(f"Dataset has {labels.num_classes} classes, architecture expects {architecture.num_classes}")

    fill = channel_mean(images)
    spec = architecture.model_copy(update={"input_mean": fill, "input_std": channel_std(images)})
    model = TinyCnn.initialize(spec, seed=derive_seed(config.seed, _INIT_STREAM))
    mask_spec = MaskSpec(rows=config.mask_rows, cols=config.mask_cols, r1=config.r1, fill=fill)

    context = AugmentationContext(fill=fill)
    if config.augmentation.kind is AugmentationKind.pixmix_style:
        context.mixer_pool = build_mixer_pool(
            config.augmentation.mixer_pool_size, config.augmentation.roughness, derive_seed(config.seed, _MIXER_STREAM)
        )

    steps_per_epoch = _num_batches(len(images), config.batch_size)
    schedule = SgdSchedule(lr0=config.lr0, total_steps=config.epochs * steps_per_epoch, momentum=config.momentum)
    optimizer = MomentumSgd(schedule, weight_decay=config.weight_decay)

    log: List[TrainingLogRecord] = []
    step = 0
    epochs = tqdm(range(config.epochs), desc="train", unit="epoch", disable=not show_progress)
    for epoch in epochs:
        totals = np.zeros(3)  # loss, ce, l_boost
        correct = 0
        seen = 0
        epoch_lr = schedule.lr(step)
        for batch_index in _batches(len(images), config.batch_size, rng_for(config.seed, _SHUFFLE_STREAM, epoch)):
            batch_images = images.take(batch_index)
            batch_labels = labels.take(batch_index)
            augmented = apply_augmentation(
                batch_images, batch_labels, config.augmentation, derive_seed(config.seed, _AUGMENT_STREAM, step), context
            )

            logits = forward(model, augmented.images.images)
            masked_logits = None
            if config.boost_enabled:
                masks = sample_masks(mask_spec, len(batch_index), rng_for(config.seed, _MASK_STREAM, step))
                masked_logits = forward(model, apply_mask(augmented.images, masks, fill))

            loss = total_loss(augmented.labels, logits, masked_logits, config.r1, config.lam)
            if not np.isfinite(loss.total.item()):
                raise NumericError(f"Non-finite loss at epoch {epoch} step {step} (ce={loss.ce}, l_boost={loss.l_boost})")

            gradients = backward(loss.total, model)
            lr = optimizer.step(model, gradients, step)
            logger.debug(f"step {step}: loss={loss.total.item():.4f} lr={lr:.5f}")

            count = len(batch_index)
            totals += np.array([loss.total.item(), loss.ce, loss.l_boost]) * count
            correct += int((logits.data.argmax(axis=1) == batch_labels.labels).sum())
            seen += count
            step += 1

        record = TrainingLogRecord(
            epoch=epoch,
            lr=epoch_lr,
            loss=float(totals[0] / seen),
            ce=float(totals[1] / seen),
            l_boost=float(totals[2] / seen),
            train_acc=correct / seen,
        )
        log.append(record)
        logger.info(
            f"epoch {epoch}: loss={record.loss:.4f} ce={record.ce:.4f} "
            f"l_boost={record.l_boost:.4f} acc={record.train_acc:.3f} lr={record.lr:.5f}"
        )
        if on_epoch is not None:
            on_epoch(record)

    metadata = {
        "seed": config.seed,
        "r1": config.r1,
        "lambda": config.lam,
        "augmentation": config.augmentation.kind.value,
        "epochs": config.epochs,
        "steps": step,
        "train_size": len(images),
    }
    return TrainResult(model=model, log=log, metadata=metadata)


# Grid search


def grid_cells(base: ExperimentConfig, r1_values: Sequence[float], lambda_values: Sequence[float]) -> List[ExperimentConfig]:
    """One config per (r1, lambda) pair in row-major order; every cell keeps the base seed."""
    if not r1_values or not lambda_values:
        raise ValueError("Grid search needs nonempty r1 and lambda lists")
    cells = []
    for r1 in r1_values:
        for lam in lambda_values:
            train_config = base.train.model_copy(update={"r1": float(r1), "lam": float(lam)})
            cells.append(base.model_copy(update={"train": train_config, "grid": None}))
    return cells


CellRunner = Callable[[ExperimentConfig], GridRow]


def run_cell_safely(runner: CellRunner, cell: ExperimentConfig) -> GridRow:
    """Run one grid cell, turning a failure into a row that carries the error text."""
    try:
        return runner(cell)
    except Exception as e:
        logger.error(f"Grid cell r1={cell.train.r1} lambda={cell.train.lam} failed: {e}")
        return GridRow(r1=cell.train.r1, lam=cell.train.lam, config_hash=cell.config_hash(), error=str(e))


def grid_search(
    r1_values: Sequence[float],
    lambda_values: Sequence[float],
    base: ExperimentConfig,
    runner: CellRunner,
    map_fn: Optional[Callable[[Callable, List[ExperimentConfig]], List[GridRow]]] = None,
    show_progress: bool = False,
) -> List[GridRow]:
    """
    Train and evaluate one model per (r1, lambda) cell.

    A failing cell becomes a row with `error` set; the rest of the grid
    still runs. `map_fn` lets the caller fan cells out to worker processes.
    Rows come back sorted by (r1, lambda).
    """
    cells = grid_cells(base, r1_values, lambda_values)
    if map_fn is None:
        rows = [
            run_cell_safely(runner, cell)
            for cell in tqdm(cells, desc="grid", unit="cell", disable=not show_progress)
        ]
    else:
        rows = map_fn(runner, cells)
    return sorted(rows, key=grid_sort_key)


def grid_sort_key(row: GridRow) -> Tuple[float, float]:
    return (row.r1, row.lam)
