import logging

import click

from commands.options import checkpoint_option, config_option, force_option, out_option, seed_option
from data_pipeline import persist_eval_bundle
from helpers import (
    CHECKPOINT_FILE,
    REPORT_FILE,
    ensure_fresh,
    experiment_dir,
    load_checkpoint_or_fail,
    load_config,
    prepare_eval,
    run_evaluation,
    tracked_run,
    with_overrides,
)
from pydantic_models import METRIC_FIELDS

logger = logging.getLogger(__name__)


@click.command("eval")
@config_option
@checkpoint_option
@out_option
@seed_option
@force_option
@click.option("--save-sets", is_flag=True, default=False, help="Also write the generated evaluation sets as CIFAR-10 records.")
def eval_command(config_path, checkpoint, out, seed, force, save_sets):
    """Evaluate a checkpoint and write report.json and report.csv."""
    config = with_overrides(load_config(config_path), seed=seed, out=out)
    directory = experiment_dir(config)
    ensure_fresh(directory / REPORT_FILE, force)
    model = load_checkpoint_or_fail(checkpoint or directory / CHECKPOINT_FILE, config)

    bundle = prepare_eval(config)
    with tracked_run("eval", config, directory):
        report = run_evaluation(config, directory, model, force=force, bundle=bundle)
        if save_sets:
            written = persist_eval_bundle(bundle, directory / "eval_sets")
            logger.info(f"Wrote {len(written)} evaluation sets under {directory / 'eval_sets'}")

    for name in METRIC_FIELDS:
        value = getattr(report, name)
        click.echo(f"{name:>14}: {'unavailable' if value is None else f'{value:.4f}'}")


commands = [eval_command]
