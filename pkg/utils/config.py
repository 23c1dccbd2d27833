import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from dotenv import load_dotenv
from utils.logger import logger
from utils.rng import resolve_seed

SEED_ENV = "MBR4_SEED"


def load_environment(dotenv_path: Optional[Union[str, Path]] = None) -> bool:
    """Load .env without overriding variables already set in the process"""
    return load_dotenv(dotenv_path=dotenv_path, override=False)


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a YAML experiment config: a flat mapping of flag names to values

    Keys may use dashes or underscores ("n-side" and "n_side" are the same flag).

    Raises:
        ValueError: the file is not a mapping
    """
    config_path = Path(path)
    with open(config_path, 'r') as f:
        data = yaml.safe_load(f) or {}

    if not isinstance(data, dict):
        raise ValueError(f"Config {config_path} must be a mapping of flag names to values")

    normalized = {str(key).replace("-", "_"): value for key, value in data.items()}
    logger.debug(f"Loaded config {config_path}: {sorted(normalized)}")
    return normalized


def master_seed(explicit: Optional[int] = None) -> int:
    """Explicit seed, else MBR4_SEED, else 0 (with a warning)"""
    seed = resolve_seed(explicit, os.getenv(SEED_ENV))
    if seed is None:
        logger.warning(f"No --seed and no {SEED_ENV}; using master seed 0")
        return 0
    return seed
