"""Environment configuration helper."""

from pathlib import Path

from consistency_mc.env import get_env_var, load_env_config, slow_tests_enabled


REPO_ROOT = Path(__file__).resolve().parents[2]


def get_scenario_dir() -> Path:
    """Get the directory holding the scenario documents."""
    return Path(get_env_var('CONSISTENCY_MC_SCENARIOS', str(REPO_ROOT / 'scenarios')))


def get_market_dir() -> Path:
    """Get the directory holding the finite-market documents."""
    return Path(get_env_var('CONSISTENCY_MC_MARKETS', str(REPO_ROOT / 'markets')))


__all__ = ["REPO_ROOT", "get_market_dir", "get_scenario_dir", "load_env_config", "slow_tests_enabled"]
