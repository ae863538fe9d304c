import logging
from pathlib import Path

import click

from commands.options import (
    checkpoint_option,
    config_option,
    force_option,
    out_option,
    proxy_param_options,
    seed_option,
)
from errors import ConfigError
from helpers import (
    CHECKPOINT_FILE,
    PROFILE_FILE,
    PROXY_FILE,
    ensure_fresh,
    experiment_dir,
    load_checkpoint_or_fail,
    load_config,
    load_profile,
    run_interactions,
    run_proxy,
    tracked_run,
    with_overrides,
)
from pydantic_models import ProxyParams

logger = logging.getLogger(__name__)


@click.command("interactions")
@config_option
@checkpoint_option
@out_option
@seed_option
@force_option
def interactions_command(config_path, checkpoint, out, seed, force):
    """Estimate the interaction profile and write profile.json and profile.svg."""
    config = with_overrides(load_config(config_path), seed=seed, out=out)
    directory = experiment_dir(config)
    ensure_fresh(directory / PROFILE_FILE, force)
    model = load_checkpoint_or_fail(checkpoint or directory / CHECKPOINT_FILE, config)

    with tracked_run("interactions", config, directory):
        result = run_interactions(config, directory, model, force=force)

    for m, j in zip(result.orders, result.J):
        click.echo(f"m={m:>3} (m/n={m / result.n:.2f})  J={j:.4f}")


@click.command("proxy")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Locate the profile by config.")
@click.option("--profile", "profile_path", type=click.Path(dir_okay=False), default=None, help="Profile JSON file.")
@out_option
@seed_option
@force_option
@proxy_param_options
def proxy_command(config_path, profile_path, out, seed, force, a, b, c):
    """Compute the proxy M(a, b, c) from a stored interaction profile."""
    if profile_path is None and config_path is None:
        raise ConfigError("Pass --profile or --config")
    if profile_path is None:
        config = with_overrides(load_config(config_path), seed=seed, out=out)
        profile_path = experiment_dir(config) / PROFILE_FILE
    profile_path = Path(profile_path)
    try:
        params = ProxyParams(a=a, b=b, c=c)
    except ValueError as e:
        raise ConfigError(f"Invalid proxy parameters: {e}") from e

    directory = profile_path.parent
    ensure_fresh(directory / PROXY_FILE, force)
    result = run_proxy(directory, load_profile(profile_path), params)
    click.echo(f"M({a}, {b}, {c}) = {result.M:.6f}")


commands = [interactions_command, proxy_command]
