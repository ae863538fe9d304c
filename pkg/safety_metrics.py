"""
Safety and robustness metrics for a trained model.

All rates are fractions in [0, 1]. Every metric is a pure function of the
model, the evaluation data and (for PGD) a seed, so reports are reproducible.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm, rankdata

from autodiff import Tensor, no_grad
from data_pipeline import CorruptionSet, EvalBundle, PerturbationSequence
from errors import LabError
from numeric_helpers import array_digest, rng_for, softmax
from pydantic_models import METRIC_FIELDS, MetricSettings, PgdConfig, ReportMetadata, SafetyReport
from tiny_cnn import TinyCnn, cross_entropy, forward

logger = logging.getLogger(__name__)

WILCOXON_EXACT_MAX = 12
WILCOXON_MIN_PAIRS = 5


# Predictions


def predict_logits(model: TinyCnn, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    chunks = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            chunks.append(forward(model, images[start : start + batch_size]).data)
    if not chunks:
        return np.zeros((0, model.num_classes))
    return np.concatenate(chunks)


def predict_proba(model: TinyCnn, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return softmax(predict_logits(model, images, batch_size))


def predict(model: TinyCnn, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return predict_logits(model, images, batch_size).argmax(axis=1)


def model_hash(model: TinyCnn) -> str:
    return array_digest(model.state_dict())[:16]


# Error rates


def error_rate(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise LabError("Cannot compute an error rate on an empty set")
    if predictions.shape != labels.shape:
        raise LabError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    return float(np.mean(predictions != labels))


def clean_error(model: TinyCnn, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    return error_rate(predict(model, images, batch_size), labels)


def mean_over_sets(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise LabError("No corruption sets to average over")
    return float(np.mean(values))


def mini_mce(model: TinyCnn, corruption_sets: Sequence[CorruptionSet], batch_size: int = 256) -> float:
    """Unnormalized mean error over every (kind, severity) set."""
    return mean_over_sets(
        [clean_error(model, cset.images.images, cset.labels.labels, batch_size) for cset in corruption_sets]
    )


def flip_rate(predictions: Sequence[Sequence[int]]) -> float:
    """Mean over sequences of (adjacent prediction changes) / (T - 1)."""
    if len(predictions) == 0:
        raise LabError("mFR needs at least one sequence")
    rates = []
    for seq in predictions:
        seq = np.asarray(seq)
        if seq.shape[0] < 2:
            raise LabError("Flip rate needs sequences of at least 2 frames")
        rates.append(np.count_nonzero(seq[1:] != seq[:-1]) / (seq.shape[0] - 1))
    return float(np.mean(rates))


def mini_mfr(model: TinyCnn, sequences: Sequence[PerturbationSequence], batch_size: int = 256) -> float:
    return flip_rate([predict(model, seq.frames, batch_size) for seq in sequences])


# Calibration


def _equal_mass_bins(sorted_confidences: np.ndarray, num_bins: int) -> List[np.ndarray]:
    """Split sorted indices into equal-mass chunks, merging chunks that would split tied confidences."""
    chunks = [c for c in np.array_split(np.arange(sorted_confidences.shape[0]), num_bins) if c.size]
    merged = [chunks[0]]
    for chunk in chunks[1:]:
        if sorted_confidences[merged[-1][-1]] == sorted_confidences[chunk[0]]:
            merged[-1] = np.concatenate([merged[-1], chunk])
        else:
            merged.append(chunk)
    return merged


def rms_calibration(confidences: np.ndarray, correct: np.ndarray, num_bins: int = 10) -> float:
    """
    Root mean square calibration error with equal-mass confidence bins.

    Args:
        confidences: Predicted-class probability per example, in [0, 1]
        correct: Whether each prediction was right
        num_bins: Number of equal-mass bins before tie merging

    Returns:
        sqrt(sum_b (|b| / N) * (accuracy_b - mean_confidence_b)^2)
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if confidences.size == 0:
        raise LabError("Calibration error needs at least one prediction")
    if num_bins < 1:
        raise LabError("num_bins must be >= 1")
    if confidences.min() < 0 or confidences.max() > 1:
        raise LabError("Confidences must lie in [0, 1]")

    order = np.argsort(confidences, kind="stable")
    conf_sorted = confidences[order]
    correct_sorted = correct[order]
    total = 0.0
    for idx in _equal_mass_bins(conf_sorted, num_bins):
        gap = correct_sorted[idx].mean() - conf_sorted[idx].mean()
        total += idx.size / confidences.size * gap * gap
    return float(math.sqrt(total))


def model_rms_calibration(
    model: TinyCnn, images: np.ndarray, labels: np.ndarray, num_bins: int = 10, batch_size: int = 256
) -> float:
    probs = predict_proba(model, images, batch_size)
    return rms_calibration(probs.max(axis=1), probs.argmax(axis=1) == labels, num_bins)


# Adversarial robustness


def pgd_attack(model: TinyCnn, images: np.ndarray, labels: np.ndarray, config: PgdConfig, seed: int) -> np.ndarray:
    """
    Untargeted L-infinity PGD on cross-entropy.

    Each step moves x by step_size * sign(grad_x CE), projects onto the
    epsilon ball around the input and clips to [0, 1].
    """
    x0 = np.asarray(images, dtype=np.float64)
    if config.epsilon == 0:
        return x0.copy()
    eps = config.epsilon
    x = x0.copy()
    if config.random_start:
        x = np.clip(x + rng_for(seed, 97).uniform(-eps, eps, size=x.shape), 0.0, 1.0)

    # gradients reach the input only
    attacked = model.frozen()
    for _ in range(config.num_steps):
        x_t = Tensor(x, requires_grad=True)
        loss = cross_entropy(forward(attacked, x_t), labels)
        loss.backward()
        x = x + config.step_size * np.sign(x_t.grad)
        x = np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)
    return x


def pgd_error(
    model: TinyCnn, images: np.ndarray, labels: np.ndarray, config: PgdConfig, seed: int, batch_size: int = 256
) -> float:
    adversarial = [
        pgd_attack(model, images[start : start + batch_size], labels[start : start + batch_size], config, seed + start)
        for start in range(0, len(images), batch_size)
    ]
    return clean_error(model, np.concatenate(adversarial), labels, batch_size)


# Out-of-distribution detection


def auroc(in_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """P(in-distribution score > OOD score), ties counted as one half."""
    in_scores = np.asarray(in_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    if in_scores.size == 0 or ood_scores.size == 0:
        raise LabError("AUROC needs nonempty in-distribution and OOD score sets")
    ranks = rankdata(np.concatenate([in_scores, ood_scores]))
    n_in, n_ood = in_scores.size, ood_scores.size
    u = ranks[:n_in].sum() - n_in * (n_in + 1) / 2.0
    return float(u / (n_in * n_ood))


def fpr_at_95tpr(in_scores: np.ndarray, ood_scores: np.ndarray, tpr: float = 0.95) -> float:
    """OOD acceptance rate at the highest threshold that accepts at least `tpr` of in-distribution data."""
    in_scores = np.asarray(in_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    if in_scores.size == 0 or ood_scores.size == 0:
        raise LabError("FPR@95TPR needs nonempty in-distribution and OOD score sets")
    threshold = np.sort(in_scores)[::-1][math.ceil(tpr * in_scores.size) - 1]
    return float(np.mean(ood_scores >= threshold))


def ood_scores(
    model: TinyCnn, in_images: np.ndarray, ood_images: np.ndarray, batch_size: int = 256
) -> Tuple[float, float]:
    """(AUROC, FPR@95TPR) using the maximum softmax probability as the in-distribution score."""
    in_msp = predict_proba(model, in_images, batch_size).max(axis=1)
    ood_msp = predict_proba(model, ood_images, batch_size).max(axis=1)
    return auroc(in_msp, ood_msp), fpr_at_95tpr(in_msp, ood_msp)


# Significance testing


@dataclass
class WilcoxonResult:
    statistic: float  # sum of ranks of positive differences
    p_value: float
    significant: bool
    n: int
    method: str


def _exact_upper_tail(ranks: np.ndarray, statistic: float) -> float:
    n = ranks.size
    signs = (np.arange(2**n)[:, None] >> np.arange(n)) & 1
    sums = signs @ ranks
    return float(np.mean(sums >= statistic - 1e-9))


def wilcoxon_signed_rank(
    diffs: Sequence[float], alpha: float = 0.05, alternative: str = "greater"
) -> WilcoxonResult:
    """
    Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped and tied magnitudes get mid-ranks. With at
    most 12 nonzero differences the null distribution is enumerated over all
    sign patterns; above that the tie-corrected normal approximation is used.
    `alternative` is "greater" (differences tend to be positive), "less" or
    "two-sided".
    """
    if alternative not in ("greater", "less", "two-sided"):
        raise ValueError(f"Unknown alternative {alternative!r}")
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n < WILCOXON_MIN_PAIRS:
        raise LabError(f"Wilcoxon test needs at least {WILCOXON_MIN_PAIRS} nonzero differences, got {n}")

    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    total = n * (n + 1) / 2.0

    if n <= WILCOXON_EXACT_MAX:
        method = "exact"
        upper = _exact_upper_tail(ranks, w_plus)
        lower = _exact_upper_tail(ranks, total - w_plus)
    else:
        method = "normal"
        _, tie_counts = np.unique(ranks, return_counts=True)
        variance = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
        z = (w_plus - total / 2.0) / math.sqrt(variance)
        upper, lower = float(norm.sf(z)), float(norm.cdf(z))

    if alternative == "greater":
        p = upper
    elif alternative == "less":
        p = lower
    else:
        p = min(1.0, 2.0 * min(upper, lower))
    return WilcoxonResult(statistic=w_plus, p_value=p, significant=p < alpha, n=n, method=method)


def wilcoxon_enumeration_oracle(diffs: Sequence[float]) -> float:
    """One-sided p-value by listing every sign pattern explicitly; for cross-checking small samples."""
    d = [x for x in diffs if x != 0]
    ranks = rankdata(np.abs(d))
    observed = sum(r for r, x in zip(ranks, d) if x > 0)
    patterns = list(itertools.product((0, 1), repeat=len(d)))
    hits = sum(1 for signs in patterns if sum(r for r, s in zip(ranks, signs) if s) >= observed - 1e-9)
    return hits / len(patterns)


# Full report


def _guarded(name: str, compute: Callable[[], float], unavailable: Dict[str, str]) -> Optional[float]:
    try:
        value = compute()
    except (LabError, ValueError, FloatingPointError) as e:
        logger.warning(f"Metric {name} unavailable: {e}")
        unavailable[name] = str(e)
        return None
    if not math.isfinite(value):
        logger.warning(f"Metric {name} is not finite")
        unavailable[name] = "non-finite value"
        return None
    return value


def full_report(
    model: TinyCnn,
    bundle: EvalBundle,
    metrics: MetricSettings,
    seed: int,
    config_hash: Optional[str] = None,
    batch_size: int = 256,
) -> SafetyReport:
    """
    Evaluate every metric on one evaluation bundle.

    A metric that fails is recorded under `unavailable` with its error text
    and left as None; the others are still computed.
    """
    x, y = bundle.clean.images, bundle.labels.labels
    unavailable: Dict[str, str] = {}
    values: Dict[str, Optional[float]] = {}

    values["clean_error"] = _guarded("clean_error", lambda: clean_error(model, x, y, batch_size), unavailable)
    values["mce"] = _guarded("mce", lambda: mini_mce(model, bundle.corruption_sets, batch_size), unavailable)
    values["mfr"] = _guarded("mfr", lambda: mini_mfr(model, bundle.sequences, batch_size), unavailable)
    values["rms_clean"] = _guarded(
        "rms_clean", lambda: model_rms_calibration(model, x, y, metrics.calibration_bins, batch_size), unavailable
    )
    values["rms_corrupt"] = _guarded(
        "rms_corrupt",
        lambda: mean_over_sets(
            [
                model_rms_calibration(model, c.images.images, c.labels.labels, metrics.calibration_bins, batch_size)
                for c in bundle.corruption_sets
            ]
        ),
        unavailable,
    )
    values["pgd_error"] = _guarded(
        "pgd_error", lambda: pgd_error(model, x, y, metrics.pgd, seed, batch_size), unavailable
    )
    detection: Dict[str, float] = {}

    def _ood(key: str) -> float:
        if not detection:
            detection["auroc"], detection["fpr_at_95tpr"] = ood_scores(model, x, bundle.ood.images, batch_size)
        return detection[key]

    values["auroc"] = _guarded("auroc", lambda: _ood("auroc"), unavailable)
    values["fpr_at_95tpr"] = _guarded("fpr_at_95tpr", lambda: _ood("fpr_at_95tpr"), unavailable)

    metadata = ReportMetadata(
        model_hash=model_hash(model),
        config_hash=config_hash,
        dataset_manifest=bundle.manifest,
        seeds={"eval": seed, "pgd": seed},
    )
    return SafetyReport(**{name: values[name] for name in METRIC_FIELDS}, unavailable=unavailable, metadata=metadata)
