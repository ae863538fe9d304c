import logging
from pathlib import Path

import click

from background_tasks import run_grid_task
from commands.options import config_option, force_option, out_option, seed_option
from helpers import config_hash, load_config, with_overrides
from reporting import write_grid_csv

logger = logging.getLogger(__name__)


@click.command("grid")
@config_option
@out_option
@seed_option
@force_option
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Worker processes.")
def grid_command(config_path, out, seed, force, jobs):
    """Train, evaluate and score one model per (r1, lambda) cell of the config's grid."""
    config = with_overrides(load_config(config_path), seed=seed, out=out)
    rows = run_grid_task(config, jobs=jobs, force=force)

    table = Path(config.output_dir) / f"grid_{config_hash(config)}.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    write_grid_csv(table, rows)

    failed = [row for row in rows if row.error]
    for row in failed:
        logger.warning(f"Cell r1={row.r1} lambda={row.lam} failed: {row.error}")
    click.echo(f"{table}  cells={len(rows)} failed={len(failed)}")


commands = [grid_command]
