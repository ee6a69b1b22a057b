# app/config.py
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field
from pathlib import Path

ROOT_DIR = Path(__file__).resolve().parent.parent
CONFIGS_DIR = ROOT_DIR / "configs"


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=str(ROOT_DIR / ".env"),
        env_file_encoding="utf-8",
        extra="ignore",
    )

    APP_ENV: str = Field(default="dev")
    LOG_LEVEL: str = Field(default="INFO")

    # where CLI runs write checkpoints, traces and metrics
    OUTPUT_DIR: str = Field(default="runs")
    # experiment directory served by the HTTP api (one seed_<n> folder)
    CHECKPOINT_DIR: str | None = None
    # which adapted thresholds under CHECKPOINT_DIR to serve
    SERVE_METHOD: str = Field(default="ours")
    DEFAULT_SEED: int = Field(default=0)

    # Safe-Bayes surrogate
    GP_MAX_JITTER_RETRIES: int = Field(default=5)
    GP_JITTER: float = Field(default=1e-8)


settings = Settings()
