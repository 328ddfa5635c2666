"""Environment configuration helper."""

import os
from typing import Optional
from dotenv import load_dotenv


def load_env_config() -> None:
    """Load environment variables from .env file."""
    load_dotenv()


def get_workers() -> int:
    """Get the number of worker threads used for path generation."""
    return max(1, int(os.getenv('CONSISTENCY_MC_WORKERS', str(os.cpu_count() or 1))))


def get_log_level() -> str:
    """Get the logging level name."""
    return os.getenv('CONSISTENCY_MC_LOG_LEVEL', 'INFO').upper()


def get_dump_paths() -> int:
    """Get the maximum number of paths written to a channel dump."""
    return int(os.getenv('CONSISTENCY_MC_DUMP_PATHS', '100'))


def slow_tests_enabled() -> bool:
    """Check whether desk-scale acceptance tests should run."""
    return os.getenv('CONSISTENCY_MC_SLOW', '0').lower() in ('1', 'true', 'yes')


def get_env_var(name: str, default: Optional[str] = None) -> str:
    """Get environment variable with optional default."""
    value = os.getenv(name, default)
    if value is None:
        raise ValueError(f"Environment variable '{name}' is required")
    return value
