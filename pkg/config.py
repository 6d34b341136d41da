import logging
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Optional, Dict, Any

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from errors import UsageError
from models import TrainConfig

PACKAGE_ROOT = Path(__file__).resolve().parent
TOOL_VERSION = "0.3.0"

class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix='CECL_', env_file='.env', env_file_encoding='utf-8', case_sensitive=False, extra='ignore')

    log_level: str = "INFO"
    lexicon_path: str = str(PACKAGE_ROOT / "data" / "lexicon.tsv")

    # Default artifact locations
    data_dir: str = "data/synth"

    # Bootstrap protocol for representation analysis
    bootstrap_resamples: int = 50000
    bootstrap_confidence: float = 0.99

    # Ablation grid concurrency
    max_concurrent_runs: int = 2  # Worker processes for `ablate`
    ablate_seeds: str = "0,1,2,3,4"

    # Metrics stream
    metrics_flush_every: int = 50  # Records buffered before a write is scheduled

    # Retrieval cutoffs reported by `eval`
    recall_ks: str = "1,5,10"

settings = Settings()


def configure_logging(level: Optional[str] = None) -> None:
    """Route log records to stderr; stdout carries reports only."""
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def parse_int_list(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x.strip()]


def read_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"config file {path} is not valid TOML: {e}") from e


def load_train_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """CLI flag > config file > built-in default."""
    values = read_config_file(path)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return TrainConfig.model_validate(values)
    except ValidationError as e:
        raise UsageError(f"invalid train config: {e}") from e
