import json
import uuid

import numpy as np
import pytest

import database
from config import settings
from data_pipeline import synth_dataset
from mixboost import train
from pydantic_models import ArchitectureSpec, TrainConfig
from tiny_cnn import TinyCnn


def tiny_config_payload(output_dir, **overrides) -> dict:
    """An experiment small enough to train, evaluate and profile in a few seconds."""
    payload = {
        "name": "tiny",
        "seed": 0,
        "dataset": {"source": "synthetic", "num_classes": 3, "per_class": 10, "train_size": 20, "test_size": 10},
        "architecture": {"widths": [4, 4, 4], "num_classes": 3},
        "train": {"r1": 0.5, "lambda": 1.0, "epochs": 1, "batch_size": 10, "mask_rows": 4, "mask_cols": 4},
        "interactions": {
            "grid_rows": 2,
            "grid_cols": 2,
            "order_fractions": [0.0, 0.25, 0.5],
            "num_pairs": 2,
            "budget": 24,
            "num_images": 2,
        },
        "metrics": {
            "eval_size": 10,
            "corruption_kinds": ["gaussian_noise", "brightness"],
            "severities": [1],
            "num_sequences": 2,
            "sequence_length": 3,
            "ood_count": 6,
            "pgd": {"num_steps": 1},
        },
        "output_dir": str(output_dir),
    }
    payload.update(overrides)
    return payload


@pytest.fixture
def tiny_spec():
    return ArchitectureSpec(widths=(4, 4, 4), num_classes=3)


@pytest.fixture
def tiny_model(tiny_spec):
    return TinyCnn.initialize(tiny_spec, seed=0)


@pytest.fixture
def synth_data():
    return synth_dataset(num_classes=3, per_class=6, seed=0)


@pytest.fixture(scope="session")
def trained_tiny_model():
    """Plain cross-entropy training on the synth_data images; shared, so tests must not modify it."""
    images, labels = synth_dataset(num_classes=3, per_class=6, seed=0)
    config = TrainConfig(lam=0.0, epochs=8, batch_size=6, mask_rows=4, mask_cols=4, lr0=0.05)
    return train(config, ArchitectureSpec(widths=(4, 4, 4), num_classes=3), images, labels).model


@pytest.fixture
def random_images():
    return np.random.default_rng(0).random((4, 3, 32, 32))


@pytest.fixture(autouse=True)
def quiet_progress(monkeypatch):
    monkeypatch.setattr(settings, "show_progress", False)


@pytest.fixture(scope="function")
def registry(tmp_path):
    db_name = tmp_path / f"registry_{uuid.uuid4()}.db"
    previous_url = str(database.engine.url)
    database.configure_registry(f"sqlite:///{db_name}")
    database.init_db()

    yield database.SessionLocal

    database.engine.dispose()
    database.configure_registry(previous_url)


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(tiny_config_payload(tmp_path / "runs")))
    return path
