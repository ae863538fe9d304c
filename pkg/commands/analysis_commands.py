import logging
from pathlib import Path
from typing import List, Optional

import click

from commands.options import force_option, proxy_param_options
from config import settings
from errors import ConfigError
from helpers import ensure_fresh, write_json
from pydantic_models import METRIC_FIELDS, ProxyParams
from reporting import (
    compare_variants,
    correlate,
    load_variants,
    search_proxy_params,
    write_correlation_csv,
)
from svg_plots import correlation_charts

logger = logging.getLogger(__name__)

ANALYSIS_DIR = "analysis"
DEFAULT_SEARCH_VALUES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def _parse_values(text: Optional[str]) -> List[float]:
    if text is None:
        return list(DEFAULT_SEARCH_VALUES)
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"Expected a comma-separated list of numbers, got {text!r}") from e


def _analysis_dir(runs: Path) -> Path:
    directory = runs / ANALYSIS_DIR
    directory.mkdir(parents=True, exist_ok=True)
    return directory


runs_option = click.option(
    "--runs",
    "runs_dir",
    type=click.Path(file_okay=False),
    default=None,
    help="Directory holding experiment directories; defaults to the configured runs directory.",
)


@click.command("correlate")
@runs_option
@force_option
@proxy_param_options
@click.option("--search-params", is_flag=True, default=False, help="Also rank a grid of (a, b, c) triples.")
@click.option("--a-values", default=None, help="Comma-separated a values for --search-params.")
@click.option("--b-values", default=None, help="Comma-separated b values for --search-params.")
@click.option("--c-values", default=None, help="Comma-separated c values for --search-params.")
def correlate_command(runs_dir, force, a, b, c, search_params, a_values, b_values, c_values):
    """Correlate the proxy M with every safety metric across experiment directories."""
    runs = Path(runs_dir or settings.runs_dir)
    try:
        params = ProxyParams(a=a, b=b, c=c)
    except ValueError as e:
        raise ConfigError(f"Invalid proxy parameters: {e}") from e

    out = _analysis_dir(runs)
    ensure_fresh(out / "correlation.json", force)
    variants = load_variants(runs)
    table = correlate(variants, params)

    write_json(out / "correlation.json", table)
    write_correlation_csv(out / "correlation.csv", table)
    for metric, svg in correlation_charts(table).items():
        (out / f"scatter_{metric}.svg").write_text(svg)

    for metric in METRIC_FIELDS:
        r = table.pearson.get(metric)
        click.echo(f"{metric:>14}: r = {'undefined' if r is None else f'{r:+.3f}'}")

    if search_params:
        ranking = search_proxy_params(
            variants, _parse_values(a_values), _parse_values(b_values), _parse_values(c_values)
        )
        write_json(out / "proxy_search.json", [row.model_dump(mode="json") for row in ranking])
        if ranking:
            best = ranking[0]
            click.echo(
                f"best (a, b, c) = ({best.params.a}, {best.params.b}, {best.params.c})"
                f"  mean |r| = {best.mean_abs_r}"
            )
        else:
            logger.warning("No (a, b, c) triple gave a defined proxy for every variant")


@click.command("report")
@runs_option
@force_option
@click.option("--baseline", required=True, help="Variant name (config `name`) to compare against.")
@click.option(
    "--metric", type=click.Choice(METRIC_FIELDS), default="mce", show_default=True, help="Metric to compare."
)
def report_command(runs_dir, force, baseline, metric):
    """Compare each variant against a baseline over runs paired by seed."""
    runs = Path(runs_dir or settings.runs_dir)
    out = _analysis_dir(runs)
    target = out / f"comparison_{metric}.json"
    ensure_fresh(target, force)

    comparisons = compare_variants(load_variants(runs), baseline, metric)
    write_json(target, [comparison.model_dump(mode="json") for comparison in comparisons])

    for comparison in comparisons:
        p = "n/a" if comparison.wilcoxon is None else f"{comparison.wilcoxon.p_value:.4f}"
        click.echo(
            f"{comparison.variant} vs {baseline}: {metric} {comparison.variant_mean:.4f} vs "
            f"{comparison.baseline_mean:.4f}, wins {comparison.wins}/{len(comparison.seeds)}, p = {p}"
        )


commands = [correlate_command, report_command]
