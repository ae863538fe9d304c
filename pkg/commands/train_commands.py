import logging

import click

from commands.options import config_option, force_option, out_option, seed_option
from helpers import CHECKPOINT_FILE, ensure_fresh, experiment_dir, load_config, run_training, tracked_run, with_overrides

logger = logging.getLogger(__name__)


@click.command("train")
@config_option
@out_option
@seed_option
@force_option
def train_command(config_path, out, seed, force):
    """Train one model and write its checkpoint and training log."""
    config = with_overrides(load_config(config_path), seed=seed, out=out)
    directory = experiment_dir(config)
    ensure_fresh(directory / CHECKPOINT_FILE, force)

    logger.info(f"Training {config.name} into {directory}")
    with tracked_run("train", config, directory):
        result = run_training(config, directory, force=force)

    final = result.log[-1]
    click.echo(f"{directory}  loss={final.loss:.4f} train_acc={final.train_acc:.3f}")


commands = [train_command]
