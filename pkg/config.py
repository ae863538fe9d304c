from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    runs_dir: str = "./runs"
    registry_url: str = "sqlite:///./runs/registry.db"
    cifar10_dir: Optional[str] = None

    log_level: str = "INFO"
    show_progress: bool = True
    eval_batch_size: int = 256  # images per no-grad forward pass

    model_config = SettingsConfigDict(env_file=".env", env_prefix="MIXBOOST_")


# Create a single instance to be imported by other modules
settings = Settings()
