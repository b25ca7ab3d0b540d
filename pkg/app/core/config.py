from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment variables from .env file
load_dotenv()


class Settings(BaseSettings):
    """Process-level settings loaded from SRWB_* environment variables."""

    # Default output root when neither --output nor output_dir is given
    output_root: Path = Path("./runs")

    # Logging configuration
    log_level: str = "INFO"
    log_file: str = "workbench.log"

    # Numeric precision for training runs (grad checks always use float64)
    precision: Literal["float32", "float64"] = "float32"

    # Manifest database file name inside the output directory
    database_name: str = "manifest.db"

    model_config = SettingsConfigDict(
        env_prefix="SRWB_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


# Create settings instance
settings = Settings()
