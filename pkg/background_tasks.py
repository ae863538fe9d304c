import logging
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Callable, List

from tqdm import tqdm

import database
from config import settings
from errors import ConfigError
from helpers import run_grid_cell
from mixboost import CellRunner, grid_search, run_cell_safely
from pydantic_models import ExperimentConfig, GridRow

logger = logging.getLogger(__name__)


def _reset_registry_pool() -> None:
    # Connections inherited from the parent process must not be reused.
    database.engine.dispose(close=False)


def process_pool_map(jobs: int) -> Callable[[CellRunner, List[ExperimentConfig]], List[GridRow]]:
    """Fan grid cells out to `jobs` worker processes; each cell writes only to its own directory."""

    def map_cells(runner: CellRunner, cells: List[ExperimentConfig]) -> List[GridRow]:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_reset_registry_pool) as pool:
            results = pool.map(partial(run_cell_safely, runner), cells)
            return list(tqdm(results, total=len(cells), desc="grid", unit="cell", disable=not settings.show_progress))

    return map_cells


def run_grid_task(config: ExperimentConfig, jobs: int = 1, force: bool = False) -> List[GridRow]:
    """Run every (r1, lambda) cell of the config's grid, in-process or across worker processes"""
    if config.grid is None:
        raise ConfigError("The config has no grid block; add r1_values and lambda_values under \"grid\"")
    runner = partial(run_grid_cell, force=force)
    logger.info(
        f"Running {len(config.grid.r1_values) * len(config.grid.lambda_values)} grid cells with {jobs} job(s)"
    )
    return grid_search(
        config.grid.r1_values,
        config.grid.lambda_values,
        config,
        runner,
        map_fn=process_pool_map(jobs) if jobs > 1 else None,
        show_progress=settings.show_progress,
    )
