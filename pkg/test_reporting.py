import json

import jsonschema
import numpy as np
import pytest
from defusedxml import ElementTree
from scipy.stats import pearsonr

from errors import DataError, LabError
from pydantic_models import GridRow, InteractionProfile, ReportMetadata, SafetyReport
from reporting import (
    VariantResult,
    compare_variants,
    correlate,
    load_variants,
    mid_band_mass,
    pearson,
    read_grid_csv,
    search_proxy_params,
    write_grid_csv,
)
from svg_plots import correlation_charts, profile_chart

SVG = "{http://www.w3.org/2000/svg}"


def step_profile(mid: float) -> InteractionProfile:
    """n=10 profile: J=2 for orders 0..2 and J=mid for orders 3..8."""
    return InteractionProfile(
        n=10, orders=list(range(9)), J=[2.0] * 3 + [mid] * 6, stderr=[0.0] * 9, normalization=1.0, num_images=1
    )


def make_report(**metrics) -> SafetyReport:
    return SafetyReport(**metrics, metadata=ReportMetadata(model_hash="0" * 64))


def make_variant(name: str, mid: float, mce: float, seed: int = 0) -> VariantResult:
    report = make_report(clean_error=0.3, mce=mce, auroc=0.5 + mid / 10, pgd_error=None)
    return VariantResult(name=name, profile=step_profile(mid), report=report, seed=seed)


@pytest.fixture
def variants():
    return [
        make_variant("baseline", 0.5, 0.40),
        make_variant("cutout", 1.0, 0.37),
        make_variant("mixboost", 1.5, 0.30),
    ]


def test_pearson_matches_scipy():
    x = [0.1, 0.4, 0.35, 0.8, 0.9]
    y = [1.0, 2.5, 2.0, 3.9, 5.0]
    assert pearson(x, y) == pytest.approx(pearsonr(x, y)[0])
    assert pearson(x, [-v for v in y]) == pytest.approx(-pearsonr(x, y)[0])


@pytest.mark.parametrize("seed", range(25))
def test_pearson_matches_scipy_on_random_samples(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(3, 40))
    x = rng.normal(loc=rng.uniform(-1e3, 1e3), scale=rng.uniform(0.01, 10.0), size=size)
    y = rng.uniform(-1.0, 1.0) * x + rng.normal(scale=rng.uniform(0.01, 10.0), size=size)
    assert pearson(x, y) == pytest.approx(pearsonr(x, y)[0], abs=1e-9)


def test_pearson_is_undefined_without_variance():
    assert pearson([1.0, 2.0, 3.0], [0.5, 0.5, 0.5]) is None
    with pytest.raises(LabError):
        pearson([1.0], [2.0])


def test_correlate_against_every_metric(variants):
    table = correlate(variants)
    M = [row.M for row in table.rows]
    assert M == sorted(M)
    assert table.pearson["mce"] == pytest.approx(pearsonr(M, [0.40, 0.37, 0.30])[0])
    assert table.pearson["mce"] < 0 < table.pearson["auroc"]
    # constant across variants, then missing everywhere
    assert table.pearson["clean_error"] is None
    assert table.pearson["pgd_error"] is None


def test_correlate_needs_three_variants(variants):
    with pytest.raises(DataError):
        correlate(variants[:2])


def test_parameter_search_ranks_valid_triples(variants):
    rows = search_proxy_params(variants, [0.0, 0.2], [0.1, 0.2], [0.8])
    triples = [(r.params.a, r.params.b, r.params.c) for r in rows]
    assert sorted(triples) == [(0.0, 0.1, 0.8), (0.0, 0.2, 0.8), (0.2, 0.2, 0.8)]
    scores = [r.mean_abs_r for r in rows]
    assert scores == sorted(scores, reverse=True)
    for row in rows:
        defined = [abs(r) for r in row.pearson.values() if r is not None]
        assert row.mean_abs_r == pytest.approx(sum(defined) / len(defined))


def test_mid_band_mass_sums_middle_orders():
    # orders 3..7 fall in [0.3, 0.7] for n=10
    assert mid_band_mass(step_profile(1.5)) == pytest.approx(7.5)


def test_compare_variants_over_paired_seeds():
    runs = []
    for seed in range(6):
        runs.append(make_variant("baseline", 0.5, 0.40 + seed / 100, seed=seed))
        runs.append(make_variant("mixboost", 1.5, 0.40 - (seed + 1) / 100, seed=seed))
    runs.append(make_variant("cutout", 1.0, 0.35, seed=0))

    comparisons = {c.variant: c for c in compare_variants(runs, baseline="baseline")}
    boosted = comparisons["mixboost"]
    assert boosted.seeds == list(range(6))
    assert boosted.wins == 6
    assert boosted.wilcoxon.p_value == pytest.approx(1 / 2**6)
    assert boosted.wilcoxon.significant
    assert boosted.mid_band_gain == pytest.approx([5.0] * 6)
    assert boosted.mid_band_wins == 6

    single = comparisons["cutout"]
    assert single.seeds == [0] and single.wilcoxon is None
    assert "at least 5" in single.wilcoxon_unavailable


def test_compare_variants_rejects_unknown_inputs(variants):
    with pytest.raises(LabError):
        compare_variants(variants, baseline="baseline", metric="accuracy")
    with pytest.raises(DataError):
        compare_variants(variants, baseline="augmix")


def write_experiment(directory, name, seed, mid, mce):
    directory.mkdir(parents=True)
    variant = make_variant(name, mid, mce, seed)
    (directory / "config.json").write_text(json.dumps({"name": name, "seed": seed}))
    (directory / "report.json").write_text(variant.report.model_dump_json())
    (directory / "profile.json").write_text(variant.profile.model_dump_json())


def test_load_variants_skips_incomplete_directories(tmp_path):
    write_experiment(tmp_path / "b", "mixboost", 1, 1.5, 0.3)
    write_experiment(tmp_path / "a", "baseline", 1, 0.5, 0.4)
    (tmp_path / "c").mkdir()
    (tmp_path / "c" / "config.json").write_text("{}")
    (tmp_path / "notes.txt").write_text("not an experiment")

    loaded = load_variants(tmp_path)
    assert [(v.name, v.seed) for v in loaded] == [("baseline", 1), ("mixboost", 1)]
    assert loaded[1].report.mce == pytest.approx(0.3)
    assert loaded[0].directory == tmp_path / "a"


def test_load_variants_reports_broken_artifacts(tmp_path):
    write_experiment(tmp_path / "a", "baseline", 0, 0.5, 0.4)
    (tmp_path / "a" / "report.json").write_text("{not json")
    with pytest.raises(DataError):
        load_variants(tmp_path)
    with pytest.raises(DataError):
        load_variants(tmp_path / "missing")


def test_grid_csv_keeps_failed_cells(tmp_path):
    rows = [
        GridRow(r1=0.3, lam=0.0, config_hash="aa", clean_error=0.25, mce=0.5, M=1.25),
        GridRow(r1=0.7, lam=1.0, config_hash="bb", error="NumericError: loss is nan"),
    ]
    path = tmp_path / "grid.csv"
    write_grid_csv(path, rows)
    assert path.read_text().splitlines()[0].startswith("r1,lambda,config_hash,clean_error")
    assert read_grid_csv(path) == rows


def test_read_grid_csv_checks_columns(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        read_grid_csv(path)


def test_profile_chart_is_valid_svg():
    profile = step_profile(0.75)
    svg = profile_chart(profile)
    root = ElementTree.fromstring(svg)
    assert root.tag == f"{SVG}svg"
    assert len(root.findall(f"{SVG}circle")) == len(profile.orders)
    assert svg == profile_chart(profile)


def test_correlation_charts_one_point_per_variant(variants):
    variants[0].name = "base<line>"
    charts = correlation_charts(correlate(variants))
    assert set(charts) == {"mce", "auroc"}
    root = ElementTree.fromstring(charts["mce"])
    assert len(root.findall(f"{SVG}circle")) == 3
    assert "base&lt;line&gt;" in charts["mce"]


def test_report_json_matches_its_schema():
    report = make_report(clean_error=0.1, mce=0.2, unavailable={"pgd_error": "skipped"})
    jsonschema.validate(json.loads(report.model_dump_json()), SafetyReport.model_json_schema())
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"mce": 2.0, "metadata": {"model_hash": "x"}}, SafetyReport.model_json_schema())
