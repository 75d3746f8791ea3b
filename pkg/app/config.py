from io import StringIO

from dotenv import dotenv_values
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.api.schemas import ExperimentConfig
from app.exceptions import ConfigError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    OUTPUT_DIR: str = "runs"

    THREADS: int = 1

    LOG_LEVEL: str = "INFO"

    PAPER_SCALE: bool = False


settings = Settings()


def parse_config(text: str) -> ExperimentConfig:
    """
    Parse flat `key = value` configuration text (comments with #) into an ExperimentConfig.

    Keys left out keep their defaults; unknown keys and invalid values raise
    ConfigError naming the key.
    """
    raw = dotenv_values(stream=StringIO(text), interpolate=False)
    for key, value in raw.items():
        if value is None:
            raise ConfigError(key, "missing value")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(part) for part in error["loc"]) or "config"
        raise ConfigError(key, error["msg"]) from exc
