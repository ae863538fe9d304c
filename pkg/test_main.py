import csv
import json
import math
from pathlib import Path

import pytest
from sqlalchemy import text

from conftest import tiny_config_payload
from db_models import RunDB, RunStatus
from checkpoints import _PREFIX, FORMAT_VERSION, MAGIC, load_checkpoint
from helpers import CHECKPOINT_FILE, PROFILE_FILE, PROXY_FILE, REPORT_FILE, experiment_dir, load_config
from main import run
from pydantic_models import InteractionProfile, ProxyResult, ReportMetadata, SafetyReport


@pytest.fixture(autouse=True)
def isolated_registry(registry):
    yield registry


def registered_runs(session_factory):
    db = session_factory()
    try:
        return db.query(RunDB).order_by(text("rowid")).all()
    finally:
        db.close()


def write_payload(path, payload):
    path.write_text(json.dumps(payload))
    return path


def step_profile(mid: float) -> InteractionProfile:
    return InteractionProfile(
        n=10, orders=list(range(9)), J=[2.0] * 3 + [mid] * 6, stderr=[0.0] * 9, normalization=1.0, num_images=1
    )


def write_variant_dir(directory, name, seed, mid, mce):
    directory.mkdir(parents=True)
    report = SafetyReport(clean_error=0.2, mce=mce, auroc=0.6 + mid / 10, metadata=ReportMetadata(model_hash="f" * 64))
    (directory / "config.json").write_text(json.dumps({"name": name, "seed": seed}))
    (directory / "report.json").write_text(report.model_dump_json())
    (directory / "profile.json").write_text(step_profile(mid).model_dump_json())


def test_help_exits_cleanly(capsys):
    assert run(["--help"]) == 0
    out = capsys.readouterr().out
    for command in ("train", "eval", "interactions", "proxy", "correlate", "report", "grid"):
        assert command in out


def test_train_writes_artifacts_and_registers_run(tiny_config_file, isolated_registry, capsys):
    assert run(["train", "--config", str(tiny_config_file)]) == 0
    config = load_config(tiny_config_file)
    directory = experiment_dir(config)
    assert (directory / CHECKPOINT_FILE).is_file()
    assert len((directory / "train_log.jsonl").read_text().splitlines()) == config.train.epochs
    assert "output_dir" not in json.loads((directory / "config.json").read_text())
    assert "loss=" in capsys.readouterr().out

    (entry,) = registered_runs(isolated_registry)
    assert entry.command == "train"
    assert entry.status == RunStatus.COMPLETE.value
    assert entry.config_hash == config.config_hash()
    assert entry.finished_at is not None and entry.error is None


def test_train_refuses_to_overwrite_without_force(tiny_config_file, capsys):
    assert run(["train", "--config", str(tiny_config_file)]) == 0
    assert run(["train", "--config", str(tiny_config_file)]) == 1
    assert "--force" in capsys.readouterr().err
    assert run(["train", "--config", str(tiny_config_file), "--force"]) == 0


def test_seed_override_moves_the_experiment(tiny_config_file):
    assert run(["train", "--config", str(tiny_config_file), "--seed", "3"]) == 0
    config = load_config(tiny_config_file)
    assert not experiment_dir(config).exists()
    reseeded = config.model_copy(update={"seed": 3, "train": config.train.model_copy(update={"seed": 3})})
    assert (experiment_dir(reseeded) / CHECKPOINT_FILE).is_file()


def test_config_seed_reaches_training_without_a_flag(tmp_path):
    path = write_payload(tmp_path / "seeded.json", tiny_config_payload(tmp_path / "runs", seed=3))
    assert run(["train", "--config", str(path)]) == 0
    config = load_config(path)
    assert config.train.seed == 3
    _, metadata = load_checkpoint(experiment_dir(config) / CHECKPOINT_FILE)
    assert metadata["seed"] == 3


def test_unknown_config_keys_are_usage_errors(tmp_path, capsys):
    payload = tiny_config_payload(tmp_path / "runs")
    payload["train"]["momentm"] = 0.5
    path = write_payload(tmp_path / "typo.json", payload)
    assert run(["train", "--config", str(path)]) == 1
    assert "train.momentm" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run(["train", "--config", str(tmp_path / "nope.json")]) == 1


def test_eval_without_checkpoint_is_a_data_error(tiny_config_file, capsys):
    assert run(["eval", "--config", str(tiny_config_file)]) == 2
    assert "Checkpoint not found" in capsys.readouterr().err


def test_full_pipeline_through_the_cli(tiny_config_file, isolated_registry, capsys):
    config_arg = ["--config", str(tiny_config_file)]
    assert run(["train", *config_arg]) == 0
    assert run(["eval", *config_arg, "--save-sets"]) == 0
    assert run(["interactions", *config_arg]) == 0
    assert run(["proxy", *config_arg]) == 0

    directory = experiment_dir(load_config(tiny_config_file))
    report = SafetyReport.model_validate_json((directory / REPORT_FILE).read_text())
    assert report.clean_error is not None and report.unavailable == {}
    assert (directory / "report.csv").is_file()
    assert (directory / "eval_sets" / "clean.bin").is_file()

    profile = InteractionProfile.model_validate_json((directory / PROFILE_FILE).read_text())
    assert profile.n == 4 and profile.orders == [0, 1, 2]
    assert (directory / "profile.svg").read_text().startswith("<svg")

    proxy = ProxyResult.model_validate_json((directory / PROXY_FILE).read_text())
    assert proxy.M >= 0
    assert "M(0.2, 0.2, 0.8)" in capsys.readouterr().out

    entries = registered_runs(isolated_registry)
    assert [e.command for e in entries] == ["train", "eval", "interactions"]
    assert all(e.status == RunStatus.COMPLETE.value for e in entries)


def test_eval_of_a_corrupt_checkpoint_is_a_data_error(tiny_config_file, tmp_path, capsys):
    checkpoint = tmp_path / "corrupt.mxb"
    checkpoint.write_bytes(_PREFIX.pack(MAGIC, FORMAT_VERSION, 5) + b"{oops")
    assert run(["eval", "--config", str(tiny_config_file), "--checkpoint", str(checkpoint)]) == 2
    assert "malformed" in capsys.readouterr().err


def test_eval_rejects_mismatched_architecture(tiny_config_file, tmp_path):
    assert run(["train", "--config", str(tiny_config_file)]) == 0
    checkpoint = experiment_dir(load_config(tiny_config_file)) / CHECKPOINT_FILE
    wider = tiny_config_payload(tmp_path / "runs", architecture={"widths": [8, 8, 8], "num_classes": 3})
    path = write_payload(tmp_path / "wider.json", wider)
    assert run(["eval", "--config", str(path), "--checkpoint", str(checkpoint)]) == 1


def test_proxy_from_a_profile_file(tmp_path):
    path = tmp_path / "profile.json"
    path.write_text(step_profile(1.5).model_dump_json())
    assert run(["proxy", "--profile", str(path)]) == 0
    result = ProxyResult.model_validate_json((tmp_path / PROXY_FILE).read_text())
    # low band m=0..2 sums to 6, mid band m=2..8 sums to 2 + 6 * 1.5, spread 0.5
    assert result.M == pytest.approx(math.sqrt(11 / (0.5 * 6)))

    assert run(["proxy", "--profile", str(path)]) == 1
    assert run(["proxy", "--profile", str(path), "--force", "--a", "0.1"]) == 0


def test_proxy_of_a_flat_profile_is_a_numeric_error(tmp_path, capsys):
    flat = InteractionProfile(n=10, orders=[0, 5], J=[1.0, 1.0], stderr=[0.0, 0.0], normalization=1.0, num_images=1)
    path = tmp_path / "profile.json"
    path.write_text(flat.model_dump_json())
    assert run(["proxy", "--profile", str(path)]) == 3
    assert "flat profile" in capsys.readouterr().err


def test_proxy_argument_errors(tmp_path):
    path = tmp_path / "profile.json"
    path.write_text(step_profile(1.0).model_dump_json())
    assert run(["proxy"]) == 1
    assert run(["proxy", "--profile", str(path), "--a", "0.5", "--b", "0.2"]) == 1
    assert run(["proxy", "--profile", str(tmp_path / "missing.json")]) == 2


def test_grid_needs_a_grid_block(tiny_config_file):
    assert run(["grid", "--config", str(tiny_config_file)]) == 1


def test_grid_writes_one_row_per_cell(tmp_path, isolated_registry):
    payload = tiny_config_payload(tmp_path / "runs", grid={"r1_values": [0.5], "lambda_values": [0.0, 1.0]})
    path = write_payload(tmp_path / "grid.json", payload)
    assert run(["grid", "--config", str(path)]) == 0

    config = load_config(path)
    with open(tmp_path / "runs" / f"grid_{config.config_hash()}.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [(row["r1"], row["lambda"]) for row in rows] == [("0.5", "0.0"), ("0.5", "1.0")]
    assert all(row["clean_error"] != "" for row in rows)

    cells = [e for e in registered_runs(isolated_registry) if e.command == "grid-cell"]
    assert sorted(e.lam for e in cells) == [0.0, 1.0]
    assert all(e.status == RunStatus.COMPLETE.value for e in cells)


def test_correlate_writes_analysis_files(tmp_path, capsys):
    runs = tmp_path / "runs"
    for name, mid, mce in [("baseline", 0.5, 0.4), ("cutout", 1.0, 0.35), ("mixboost", 1.5, 0.3)]:
        write_variant_dir(runs / name, name, 0, mid, mce)

    assert run(["correlate", "--runs", str(runs)]) == 0
    analysis = runs / "analysis"
    table = json.loads((analysis / "correlation.json").read_text())
    assert [row["variant"] for row in table["rows"]] == ["baseline", "cutout", "mixboost"]
    assert table["pearson"]["mce"] < 0
    assert (analysis / "correlation.csv").is_file()
    assert (analysis / "scatter_mce.svg").is_file()
    assert "mce: r = -" in capsys.readouterr().out

    assert run(["correlate", "--runs", str(runs)]) == 1
    args = ["correlate", "--runs", str(runs), "--force", "--search-params", "--a-values", "0,0.2", "--c-values", "0.8"]
    assert run(args) == 0
    ranking = json.loads((analysis / "proxy_search.json").read_text())
    assert ranking and all(row["params"]["c"] == 0.8 for row in ranking)


def test_correlate_needs_three_variants(tmp_path):
    runs = tmp_path / "runs"
    write_variant_dir(runs / "baseline", "baseline", 0, 0.5, 0.4)
    assert run(["correlate", "--runs", str(runs)]) == 2


def test_report_compares_variants_by_seed(tmp_path, capsys):
    runs = tmp_path / "runs"
    for seed in range(5):
        write_variant_dir(runs / f"base{seed}", "baseline", seed, 0.5, 0.4 + seed / 100)
        write_variant_dir(runs / f"boost{seed}", "mixboost", seed, 1.5, 0.39 - seed / 100)

    assert run(["report", "--runs", str(runs), "--baseline", "baseline"]) == 0
    (comparison,) = json.loads((runs / "analysis" / "comparison_mce.json").read_text())
    assert comparison["wins"] == 5
    assert comparison["wilcoxon"]["p_value"] == pytest.approx(1 / 32)
    assert "wins 5/5" in capsys.readouterr().out

    assert run(["report", "--runs", str(runs), "--baseline", "baseline", "--metric", "accuracy"]) == 1


def test_example_config_is_valid():
    config = load_config(Path(__file__).parent / "experiment.example.json")
    assert config.train.augmentation.kind.value == "pixmix_style"
    assert config.grid is not None
