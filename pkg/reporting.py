"""
Cross-experiment analysis: correlation of the proxy M with the safety
metrics, proxy parameter search, paired comparison of repeated runs, and
CSV export of reports and grid tables.
"""

import csv
import itertools
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from errors import DataError, DegenerateProfileError, LabError
from interactions import proxy_m
from pydantic_models import (
    METRIC_FIELDS,
    CorrelationRow,
    CorrelationTable,
    GridRow,
    InteractionProfile,
    ProxyParams,
    ProxySearchRow,
    SafetyReport,
    VariantComparison,
    WilcoxonSummary,
)
from safety_metrics import wilcoxon_signed_rank

logger = logging.getLogger(__name__)

MIN_CORRELATION_VARIANTS = 3
MID_BAND = (0.3, 0.7)


@dataclass
class VariantResult:
    name: str
    profile: InteractionProfile
    report: SafetyReport
    seed: int = 0
    directory: Optional[Path] = None


def pearson(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Two-pass Pearson correlation; None when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise LabError("Pearson correlation needs two equal-length samples of at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        return None
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def mid_band_mass(profile: InteractionProfile, low: float = MID_BAND[0], high: float = MID_BAND[1]) -> float:
    """Sum of J over evaluated orders with low <= m / n <= high."""
    return float(sum(j for m, j in zip(profile.orders, profile.J) if low <= m / profile.n <= high))


# Correlation


def _metric_columns(variants: Sequence[VariantResult], M: Sequence[float]) -> Dict[str, Optional[float]]:
    table: Dict[str, Optional[float]] = {}
    for name in METRIC_FIELDS:
        pairs = [(m, getattr(v.report, name)) for m, v in zip(M, variants) if getattr(v.report, name) is not None]
        if len(pairs) < MIN_CORRELATION_VARIANTS:
            table[name] = None
            continue
        table[name] = pearson([p[0] for p in pairs], [p[1] for p in pairs])
    return table


def correlate(variants: Sequence[VariantResult], params: Optional[ProxyParams] = None) -> CorrelationTable:
    """
    Pearson r between M(a, b, c) and each safety metric across variants.

    A metric that is constant across variants (or missing for too many of
    them) gets r = None.
    """
    params = params or ProxyParams()
    if len(variants) < MIN_CORRELATION_VARIANTS:
        raise DataError(f"Correlation needs at least {MIN_CORRELATION_VARIANTS} variants, got {len(variants)}")
    M = [proxy_m(v.profile, params) for v in variants]
    rows = [
        CorrelationRow(variant=v.name, M=m, metrics={name: getattr(v.report, name) for name in METRIC_FIELDS})
        for v, m in zip(variants, M)
    ]
    return CorrelationTable(params=params, rows=rows, pearson=_metric_columns(variants, M))


def search_proxy_params(
    variants: Sequence[VariantResult],
    a_values: Iterable[float],
    b_values: Iterable[float],
    c_values: Iterable[float],
) -> List[ProxySearchRow]:
    """
    Score every valid (a, b, c) triple by the mean |r| between M and the
    available metrics, best first. Triples whose M is undefined for some
    variant are skipped.
    """
    if len(variants) < MIN_CORRELATION_VARIANTS:
        raise DataError(f"Parameter search needs at least {MIN_CORRELATION_VARIANTS} variants, got {len(variants)}")
    rows: List[ProxySearchRow] = []
    for a, b, c in itertools.product(sorted(set(a_values)), sorted(set(b_values)), sorted(set(c_values))):
        if not 0 <= a <= b <= c <= 1:
            continue
        params = ProxyParams(a=a, b=b, c=c)
        try:
            M = [proxy_m(v.profile, params) for v in variants]
        except DegenerateProfileError as e:
            logger.debug(f"Skipping a={a} b={b} c={c}: {e}")
            continue
        table = _metric_columns(variants, M)
        defined = [abs(r) for r in table.values() if r is not None]
        rows.append(ProxySearchRow(params=params, mean_abs_r=float(np.mean(defined)) if defined else None, pearson=table))

    def rank(row: ProxySearchRow):
        score = row.mean_abs_r if row.mean_abs_r is not None else -1.0
        return (-score, row.params.a, row.params.b, row.params.c)

    return sorted(rows, key=rank)


# Repeated runs


def compare_variants(runs: Sequence[VariantResult], baseline: str, metric: str = "mce") -> List[VariantComparison]:
    """
    Compare every variant against the baseline on runs paired by seed.

    For each variant this reports the mean metric on both sides, the number
    of seeds where the variant is lower (better), a one-sided Wilcoxon test
    of baseline - variant > 0, and the per-seed gain in mid-band interaction
    mass.
    """
    if metric not in METRIC_FIELDS:
        raise LabError(f"Unknown metric {metric!r}; choose one of {', '.join(METRIC_FIELDS)}")
    by_name: Dict[str, Dict[int, VariantResult]] = defaultdict(dict)
    for run in runs:
        by_name[run.name][run.seed] = run
    if baseline not in by_name:
        raise DataError(f"No runs named {baseline!r}")

    comparisons = []
    for name in sorted(by_name):
        if name == baseline:
            continue
        seeds = sorted(
            s
            for s in set(by_name[name]) & set(by_name[baseline])
            if getattr(by_name[name][s].report, metric) is not None
            and getattr(by_name[baseline][s].report, metric) is not None
        )
        if not seeds:
            logger.warning(f"Variant {name} shares no evaluated seeds with {baseline}")
            continue
        base_values = np.array([getattr(by_name[baseline][s].report, metric) for s in seeds])
        variant_values = np.array([getattr(by_name[name][s].report, metric) for s in seeds])
        diffs = base_values - variant_values

        wilcoxon, reason = None, None
        try:
            result = wilcoxon_signed_rank(diffs, alternative="greater")
            wilcoxon = WilcoxonSummary(**result.__dict__)
        except LabError as e:
            reason = e.detail

        gains = [
            mid_band_mass(by_name[name][s].profile) - mid_band_mass(by_name[baseline][s].profile) for s in seeds
        ]
        comparisons.append(
            VariantComparison(
                variant=name,
                baseline=baseline,
                metric=metric,
                seeds=seeds,
                baseline_mean=float(base_values.mean()),
                variant_mean=float(variant_values.mean()),
                wins=int((diffs > 0).sum()),
                wilcoxon=wilcoxon,
                wilcoxon_unavailable=reason,
                mid_band_gain=gains,
                mid_band_wins=sum(1 for g in gains if g > 0),
            )
        )
    return comparisons


# Loading experiment directories


def load_variant(directory: Union[str, Path]) -> VariantResult:
    directory = Path(directory)
    try:
        config = json.loads((directory / "config.json").read_text())
        report = SafetyReport.model_validate_json((directory / "report.json").read_text())
        profile = InteractionProfile.model_validate_json((directory / "profile.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"{directory} is missing {Path(e.filename).name}") from e
    except ValueError as e:
        raise DataError(f"{directory} holds an unreadable artifact: {e}") from e
    return VariantResult(
        name=config.get("name", directory.name), profile=profile, report=report, seed=config.get("seed", 0), directory=directory
    )


def load_variants(root: Union[str, Path]) -> List[VariantResult]:
    """Every experiment directory under `root` that has a config, a report and a profile."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    variants = []
    for child in sorted(p for p in root.iterdir() if p.is_dir()):
        if all((child / f).is_file() for f in ("config.json", "report.json", "profile.json")):
            variants.append(load_variant(child))
        else:
            logger.debug(f"Skipping {child}: incomplete experiment directory")
    return variants


# CSV


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_float(text: str) -> Optional[float]:
    return None if text == "" else float(text)


REPORT_COLUMNS = ("variant", "model_hash", "config_hash", *METRIC_FIELDS)
GRID_COLUMNS = ("r1", "lambda", "config_hash", *METRIC_FIELDS, "M", "error")


def write_report_csv(path: Union[str, Path], rows: Sequence[tuple]) -> None:
    """One row per (variant name, SafetyReport)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for name, report in rows:
            writer.writerow(
                [name, report.metadata.model_hash, _cell(report.metadata.config_hash)]
                + [_cell(getattr(report, field)) for field in METRIC_FIELDS]
            )


def write_grid_csv(path: Union[str, Path], rows: Sequence[GridRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(GRID_COLUMNS)
        for row in rows:
            data = row.model_dump(by_alias=True)
            writer.writerow([_cell(data[column]) for column in GRID_COLUMNS])


def read_grid_csv(path: Union[str, Path]) -> List[GridRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != GRID_COLUMNS:
            raise DataError(f"{path} does not have the grid table columns")
        rows = []
        for record in reader:
            values = {column: _parse_float(record[column]) for column in ("r1", "lambda", *METRIC_FIELDS, "M")}
            rows.append(
                GridRow(**values, config_hash=record["config_hash"], error=record["error"] or None)
            )
    return rows


def write_correlation_csv(path: Union[str, Path], table: CorrelationTable) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("variant", "M", *METRIC_FIELDS))
        for row in table.rows:
            writer.writerow([row.variant, _cell(row.M)] + [_cell(row.metrics.get(field)) for field in METRIC_FIELDS])
        writer.writerow(["pearson", ""] + [_cell(table.pearson.get(field)) for field in METRIC_FIELDS])
