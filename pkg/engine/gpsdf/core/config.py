import os
from pathlib import Path

from pydantic import ConfigDict, computed_field, field_validator
from pydantic_settings import BaseSettings

# Get engine root directory (two levels up from this file: engine/gpsdf/core/config.py -> engine)
ENGINE_ROOT = Path(__file__).parent.parent.parent
ENV_FILE = ENGINE_ROOT / ".env"


class Settings(BaseSettings):
    # Application
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # Optional directory for rotating JSON log files; console only when unset
    LOG_DIR: Path | None = None

    # Worker cap for the parallel kernels (tsdf, splatting, reductions)
    GPS_THREADS: int | None = None

    @field_validator("GPS_THREADS", mode="before")
    @classmethod
    def parse_threads(cls, v: str | int | None) -> int | None:
        if v in (None, ""):
            return None
        threads = int(v)
        if threads < 1:
            raise ValueError("GPS_THREADS must be >= 1")
        return threads

    @computed_field
    @property
    def WORKER_COUNT(self) -> int:
        return self.GPS_THREADS or os.cpu_count() or 1

    model_config = ConfigDict(env_file=str(ENV_FILE), env_file_encoding="utf-8")


settings = Settings()
