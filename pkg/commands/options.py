"""Options shared by several commands."""

import click

config_option = click.option(
    "--config",
    "config_path",
    required=True,
    type=click.Path(dir_okay=False),
    help="Experiment config file (JSON).",
)
out_option = click.option("--out", default=None, help="Output root; overrides the config's output_dir.")
seed_option = click.option("--seed", type=int, default=None, help="Override the experiment seed.")
force_option = click.option("--force", is_flag=True, default=False, help="Overwrite existing artifacts.")
checkpoint_option = click.option(
    "--checkpoint",
    type=click.Path(dir_okay=False),
    default=None,
    help="Checkpoint to load; defaults to the experiment directory's checkpoint.",
)


def proxy_param_options(func):
    func = click.option("--c", "c", type=float, default=0.8, show_default=True, help="Upper end of the mid band.")(func)
    func = click.option("--b", "b", type=float, default=0.2, show_default=True, help="Lower end of the mid band.")(func)
    func = click.option("--a", "a", type=float, default=0.2, show_default=True, help="Upper end of the low band.")(func)
    return func
