"""
Helper functions for configuration loading, experiment directories, the run
registry and the train / evaluate / interaction pipelines the commands share.
"""

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError
from sqlalchemy.orm import Session

from checkpoints import load_checkpoint, save_checkpoint
from config import settings
from data_pipeline import DatasetSplits, EvalBundle, build_eval_bundle, load_dataset
from database import get_db
from db_models import RunDB, RunStatus
from errors import ConfigError, DataError, LabError
from interactions import PlayerGrid, order_grid, profile, profile_hash, proxy_m
from mixboost import TrainResult, train
from pydantic_models import (
    METRIC_FIELDS,
    ExperimentConfig,
    GridRow,
    InteractionProfile,
    ProxyParams,
    ProxyResult,
    SafetyReport,
)
from reporting import write_report_csv
from safety_metrics import full_report
from svg_plots import profile_chart
from tiny_cnn import TinyCnn

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "checkpoint.mxb"
TRAIN_LOG_FILE = "train_log.jsonl"
REPORT_FILE = "report.json"
REPORT_CSV_FILE = "report.csv"
PROFILE_FILE = "profile.json"
PROFILE_SVG_FILE = "profile.svg"
PROXY_FILE = "proxy.json"


# Configuration


def _format_validation_error(error: ValidationError) -> str:
    unknown = [".".join(str(p) for p in e["loc"]) for e in error.errors() if e["type"] == "extra_forbidden"]
    other = [
        f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}"
        for e in error.errors()
        if e["type"] != "extra_forbidden"
    ]
    parts = []
    if unknown:
        parts.append(f"unknown keys: {', '.join(unknown)}")
    if other:
        parts.append("; ".join(other))
    return "; ".join(parts)


def parse_config(payload: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config: {_format_validation_error(e)}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Read and validate an experiment config file.

    Args:
        path: JSON file with the ExperimentConfig keys

    Returns:
        The validated config

    Raises:
        ConfigError: If the file is unreadable, not JSON, or fails validation
            (unknown keys are listed by their dotted path)
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return parse_config(payload)


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json", by_alias=True)


def config_hash(config: ExperimentConfig) -> str:
    return config.config_hash()


def with_overrides(config: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    """Apply --seed and --out; the seed drives both the experiment and training streams."""
    update: Dict[str, Any] = {}
    if seed is not None:
        update["seed"] = seed
        update["train"] = config.train.model_copy(update={"seed": seed})
    if out is not None:
        update["output_dir"] = out
    return config.model_copy(update=update) if update else config


def experiment_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / config_hash(config)


def ensure_fresh(path: Path, force: bool) -> None:
    """Refuse to overwrite an existing artifact unless forced."""
    if path.exists() and not force:
        raise ConfigError(f"{path} already exists; pass --force to overwrite it")


# Artifact I/O


def write_json(path: Union[str, Path], payload: Union[BaseModel, Dict[str, Any], List[Any]]) -> None:
    if isinstance(payload, BaseModel):
        text = json.dumps(payload.model_dump(mode="json", by_alias=True), indent=2, sort_keys=True)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n")


def write_config(directory: Path, config: ExperimentConfig) -> None:
    """Persist the config without output_dir so the file depends only on the hashed content."""
    payload = config_to_dict(config)
    payload.pop("output_dir", None)
    write_json(directory / CONFIG_FILE, payload)


def load_checkpoint_or_fail(path: Union[str, Path], config: Optional[ExperimentConfig] = None) -> TinyCnn:
    """
    Load a checkpoint, checking it against the configured architecture.

    Raises:
        DataError: If the file is missing or malformed
        ConfigError: If widths or class count differ from the config
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    if config is not None:
        expected = config.architecture
        if tuple(model.spec.widths) != tuple(expected.widths) or model.spec.num_classes != expected.num_classes:
            raise ConfigError(
                f"Checkpoint architecture (widths={model.spec.widths}, classes={model.spec.num_classes}) "
                f"does not match the config (widths={expected.widths}, classes={expected.num_classes})"
            )
    return model


def load_profile(path: Union[str, Path]) -> InteractionProfile:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Profile not found: {path}")
    try:
        return InteractionProfile.model_validate_json(path.read_text())
    except ValueError as e:
        raise DataError(f"{path} is not a valid interaction profile: {e}") from e


# Run registry


def start_run(
    db: Session, command: str, config: ExperimentConfig, directory: Path, r1: Optional[float] = None, lam: Optional[float] = None
) -> RunDB:
    run = RunDB(
        command=command,
        config_hash=config_hash(config),
        experiment_dir=str(directory),
        status=RunStatus.RUNNING.value,
        r1=r1,
        lam=lam,
    )
    db.add(run)
    db.commit()
    db.refresh(run)
    return run


def finish_run(db: Session, run: RunDB, error: Optional[str] = None) -> None:
    run.status = RunStatus.FAILED.value if error else RunStatus.COMPLETE.value
    run.error = error
    run.finished_at = datetime.now(timezone.utc)
    db.commit()


def is_complete(db: Session, command: str, hash_: str) -> bool:
    return (
        db.query(RunDB)
        .filter(RunDB.command == command, RunDB.config_hash == hash_, RunDB.status == RunStatus.COMPLETE.value)
        .first()
        is not None
    )


class tracked_run:
    """Record a command in the registry as running, then complete or failed."""

    def __init__(self, command: str, config: ExperimentConfig, directory: Path, **grid_key):
        self.command = command
        self.config = config
        self.directory = directory
        self.grid_key = grid_key
        self._db_context = None
        self.db: Optional[Session] = None
        self.run: Optional[RunDB] = None

    def __enter__(self) -> "tracked_run":
        self._db_context = get_db()
        self.db = self._db_context.__enter__()
        self.run = start_run(self.db, self.command, self.config, self.directory, **self.grid_key)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        try:
            finish_run(self.db, self.run, error=None if exc is None else str(getattr(exc, "detail", exc)))
        finally:
            self._db_context.__exit__(None, None, None)
        return False


# Pipelines


def prepare_data(config: ExperimentConfig) -> DatasetSplits:
    return load_dataset(config.dataset, config.seed, settings.cifar10_dir)


def prepare_eval(config: ExperimentConfig, data: Optional[DatasetSplits] = None) -> EvalBundle:
    data = data or prepare_data(config)
    return build_eval_bundle(data.test_images, data.test_labels, config.metrics, config.seed)


def run_training(
    config: ExperimentConfig, directory: Path, force: bool = False, data: Optional[DatasetSplits] = None
) -> TrainResult:
    """Train, then write config.json, train_log.jsonl and checkpoint.mxb into the experiment directory."""
    ensure_fresh(directory / CHECKPOINT_FILE, force)
    data = data or prepare_data(config)
    directory.mkdir(parents=True, exist_ok=True)
    write_config(directory, config)

    log_path = directory / TRAIN_LOG_FILE
    log_path.write_text("")

    def append_record(record):
        with open(log_path, "a") as f:
            f.write(record.model_dump_json() + "\n")

    result = train(
        config.train,
        config.architecture,
        data.train_images,
        data.train_labels,
        show_progress=settings.show_progress,
        on_epoch=append_record,
    )
    metadata = {**result.metadata, "config_hash": config_hash(config), "dataset": data.manifest}
    save_checkpoint(directory / CHECKPOINT_FILE, result.model, metadata)
    logger.info(f"Checkpoint written to {directory / CHECKPOINT_FILE}")
    return result


def run_evaluation(
    config: ExperimentConfig,
    directory: Path,
    model: TinyCnn,
    force: bool = False,
    bundle: Optional[EvalBundle] = None,
) -> SafetyReport:
    ensure_fresh(directory / REPORT_FILE, force)
    bundle = bundle or prepare_eval(config)
    report = full_report(
        model, bundle, config.metrics, config.seed, config_hash=config_hash(config), batch_size=settings.eval_batch_size
    )
    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / REPORT_FILE, report)
    write_report_csv(directory / REPORT_CSV_FILE, [(config.name, report)])
    return report


def interaction_images(config: ExperimentConfig, bundle: EvalBundle) -> Tuple[np.ndarray, np.ndarray]:
    count = min(config.interactions.num_images, len(bundle.clean))
    return bundle.clean.images[:count], bundle.labels.labels[:count]


def run_interactions(
    config: ExperimentConfig,
    directory: Path,
    model: TinyCnn,
    force: bool = False,
    bundle: Optional[EvalBundle] = None,
) -> InteractionProfile:
    """Estimate the model's interaction profile and write profile.json and profile.svg."""
    ensure_fresh(directory / PROFILE_FILE, force)
    bundle = bundle or prepare_eval(config)
    settings_ = config.interactions
    grid = PlayerGrid(settings_.grid_rows, settings_.grid_cols, baseline=tuple(model.spec.input_mean))
    images, labels = interaction_images(config, bundle)
    result = profile(
        model,
        images,
        labels,
        grid,
        order_grid(grid.n, settings_.order_fractions),
        settings_.budget,
        settings_.num_pairs,
        config.seed,
        batch_size=settings.eval_batch_size,
        show_progress=settings.show_progress,
    )
    result = result.model_copy(update={"config_hash": config_hash(config)})
    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / PROFILE_FILE, result)
    (directory / PROFILE_SVG_FILE).write_text(profile_chart(result, title=f"{config.name}: relative interaction strength"))
    return result


def run_proxy(directory: Path, interaction_profile: InteractionProfile, params: ProxyParams) -> ProxyResult:
    result = ProxyResult(M=proxy_m(interaction_profile, params), params=params, profile_hash=profile_hash(interaction_profile))
    write_json(directory / PROXY_FILE, result)
    return result


def grid_row(config: ExperimentConfig, report: Optional[SafetyReport], M: Optional[float], error: Optional[str] = None) -> GridRow:
    values = {name: getattr(report, name) if report is not None else None for name in METRIC_FIELDS}
    return GridRow(r1=config.train.r1, lam=config.train.lam, config_hash=config_hash(config), M=M, error=error, **values)


def run_grid_cell(config: ExperimentConfig, force: bool = False) -> GridRow:
    """
    Train, evaluate, profile and score one grid cell in its own experiment
    directory. A cell already completed in the registry with its artifacts
    on disk is read back instead of recomputed.
    """
    directory = experiment_dir(config)
    hash_ = config_hash(config)
    artifacts = [directory / name for name in (CHECKPOINT_FILE, REPORT_FILE, PROFILE_FILE, PROXY_FILE)]
    with get_db() as db:
        done = is_complete(db, "grid-cell", hash_)
    if done and all(p.exists() for p in artifacts) and not force:
        logger.info(f"Grid cell {hash_} already complete, reusing its artifacts")
        report = SafetyReport.model_validate_json((directory / REPORT_FILE).read_text())
        M = ProxyResult.model_validate_json((directory / PROXY_FILE).read_text()).M
        return grid_row(config, report, M)

    with tracked_run("grid-cell", config, directory, r1=config.train.r1, lam=config.train.lam):
        data = prepare_data(config)
        bundle = prepare_eval(config, data)
        result = run_training(config, directory, force=True, data=data)
        report = run_evaluation(config, directory, result.model, force=True, bundle=bundle)
        interaction_profile = run_interactions(config, directory, result.model, force=True, bundle=bundle)
        try:
            M = run_proxy(directory, interaction_profile, config.proxy).M
        except LabError as e:
            logger.warning(f"Proxy undefined for cell {hash_}: {e.detail}")
            M = None
    return grid_row(config, report, M)
