"""
Line and scatter charts rendered to SVG from Jinja2 templates.

Coordinates are formatted with a fixed number of decimals, so identical
inputs always give identical bytes.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import jinja2
import numpy as np

from pydantic_models import CorrelationTable, InteractionProfile

TEMPLATE_DIR = Path(__file__).parent / "templates"
WIDTH, HEIGHT = 480, 320
MARGIN = {"left": 56, "right": 16, "top": 30, "bottom": 44}


@dataclass(frozen=True)
class PlotArea:
    left: float
    right: float
    top: float
    bottom: float


def _px(value: float) -> str:
    return f"{value:.2f}"


def _create_env() -> jinja2.Environment:
    env = jinja2.Environment(
        loader=jinja2.FileSystemLoader(str(TEMPLATE_DIR)),
        autoescape=True,
        trim_blocks=True,
        keep_trailing_newline=True,
        undefined=jinja2.StrictUndefined,
    )
    env.filters["px"] = _px
    return env


def _domain(values: Sequence[float]) -> Tuple[float, float]:
    lo, hi = float(min(values)), float(max(values))
    if hi == lo:
        return lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _scale(value: float, domain: Tuple[float, float], start: float, end: float) -> float:
    lo, hi = domain
    return start + (value - lo) / (hi - lo) * (end - start)


def _ticks(domain: Tuple[float, float], start: float, end: float, count: int = 5) -> List[dict]:
    return [
        {"pos": _scale(v, domain, start, end), "text": f"{v:.3g}"}
        for v in np.linspace(domain[0], domain[1], count)
    ]


def _render(
    template: str,
    xs: Sequence[float],
    ys: Sequence[float],
    labels: Sequence[str],
    title: str,
    x_label: str,
    y_label: str,
    x_domain: Optional[Tuple[float, float]] = None,
) -> str:
    if len(xs) != len(ys) or len(xs) != len(labels):
        raise ValueError("xs, ys and labels must have equal length")
    if not xs:
        raise ValueError("A chart needs at least one point")
    plot = PlotArea(
        left=MARGIN["left"], right=WIDTH - MARGIN["right"], top=MARGIN["top"], bottom=HEIGHT - MARGIN["bottom"]
    )
    x_dom = x_domain or _domain(xs)
    y_dom = _domain(ys)
    points = [
        {
            "x": _scale(x, x_dom, plot.left, plot.right),
            "y": _scale(y, y_dom, plot.bottom, plot.top),
            "label": label,
        }
        for x, y, label in zip(xs, ys, labels)
    ]
    return (
        _create_env()
        .get_template(template)
        .render(
            width=WIDTH,
            height=HEIGHT,
            plot=plot,
            points=points,
            title=title,
            x_label=x_label,
            y_label=y_label,
            x_ticks=_ticks(x_dom, plot.left, plot.right),
            y_ticks=_ticks(y_dom, plot.bottom, plot.top),
        )
    )


def line_chart(xs: Sequence[float], ys: Sequence[float], title: str, x_label: str, y_label: str) -> str:
    labels = [f"({x:.3g}, {y:.4g})" for x, y in zip(xs, ys)]
    return _render("line_chart.svg.j2", xs, ys, labels, title, x_label, y_label)


def scatter_chart(
    xs: Sequence[float], ys: Sequence[float], labels: Sequence[str], title: str, x_label: str, y_label: str
) -> str:
    return _render("scatter_chart.svg.j2", xs, ys, labels, title, x_label, y_label)


def profile_chart(profile: InteractionProfile, title: str = "Relative interaction strength") -> str:
    """J against order / n, one marker per evaluated order."""
    return _render(
        "line_chart.svg.j2",
        profile.fractions,
        profile.J,
        [f"m={m}: J={j:.4g}" for m, j in zip(profile.orders, profile.J)],
        title,
        "order / n",
        "J",
        x_domain=(0.0, 1.0),
    )


def correlation_charts(table: CorrelationTable) -> dict:
    """One scatter of metric against M per metric that has a defined Pearson r."""
    charts = {}
    for metric, r in table.pearson.items():
        if r is None:
            continue
        rows = [row for row in table.rows if row.metrics.get(metric) is not None]
        charts[metric] = scatter_chart(
            [row.M for row in rows],
            [row.metrics[metric] for row in rows],
            [row.variant for row in rows],
            f"{metric} vs M (r = {r:.3f})",
            "M",
            metric,
        )
    return charts
