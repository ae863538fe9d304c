# Standard library imports
import logging
import sys
from typing import List, Optional

# Third-party imports
import click
from pydantic import ValidationError

# Local imports
from config import settings
from database import init_db
from errors import LabError
from commands import (
    train_commands,
    eval_commands,
    interaction_commands,
    analysis_commands,
    grid_commands,
)

logger = logging.getLogger(__name__)


def create_cli() -> click.Group:

    @click.group(help="MixBoost desk lab: train, evaluate and analyse small image classifiers.")
    @click.option("--log-level", default=None, help="Overrides MIXBOOST_LOG_LEVEL.")
    def cli(log_level):
        logging.basicConfig(
            level=(log_level or settings.log_level).upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        init_db()

    # Register commands
    command_groups = [
        train_commands.commands,
        eval_commands.commands,
        interaction_commands.commands,
        analysis_commands.commands,
        grid_commands.commands,
    ]

    for commands in command_groups:
        for command in commands:
            cli.add_command(command)

    return cli


def run(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and translate failures into exit codes (1 usage/config, 2 data, 3 numeric)."""
    cli = create_cli()
    try:
        cli.main(args=argv, prog_name="mixboost", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except LabError as e:
        logger.debug("Command failed", exc_info=True)
        click.echo(f"Error: {e.detail}", err=True)
        return e.exit_code
    except ValidationError as e:
        click.echo(f"Error: {e}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(run())
