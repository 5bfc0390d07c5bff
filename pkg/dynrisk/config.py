#!/usr/bin/env python3
"""
Configuration for dynrisk runs.
Default settings merged with an optional JSON run file and the environment.
"""

import copy
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Optional

from dotenv import load_dotenv

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

LOG_ENV_VAR = "DYNRISK_LOG"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Default configuration
DEFAULT_CONFIG = {
    "forest": {
        "n_trees": 500,
        "max_depth": None,
        "min_samples_leaf": 1,
        "mtry": None,  # floor(sqrt(p))
        "bootstrap": True,
    },
    "cox": {
        "ties": "efron",
        "tol": 1e-8,
        "max_iter": 50,
        "max_halvings": 10,
        "separation_bound": 20.0,
    },
    "encoding": {
        "normalization": "zscore",
        "impute": "cohort",
        "include_post_test_symptoms": True,
    },
    # Physiological plausibility ranges, [low, high] inclusive
    "plausibility": {
        "systolic_bp": [50.0, 260.0],
        "diastolic_bp": [20.0, 160.0],
        "heart_rate": [20.0, 250.0],
        "body_temperature": [30.0, 45.0],
        "oxygen_saturation": [50.0, 100.0],
        "respiratory_rate": [4.0, 60.0],
    },
    "evaluation": {
        "betas": [0.5, 1.0, 2.0, 3.0, 5.0],
        "ci_level": 0.95,
        "ci_resamples": 1000,
        "failure_tolerance": 0.01,
    },
    "run": {
        "seed": 0,
        "threads": 1,
    },
}


def load_config(path: Optional[str] = None) -> Dict:
    """
    Load run configuration, merged over the defaults.

    Args:
        path: JSON run file; None or a missing file gives the defaults

    Returns:
        Complete configuration dictionary
    """
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return config

    try:
        with open(path, "r", encoding="utf-8") as f:
            loaded = json.load(f)
    except FileNotFoundError:
        logger.info(f"No run config at {path}, using defaults")
        return config
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from e

    if not isinstance(loaded, dict):
        raise ConfigurationError(f"{path}: top level must be an object")

    for section, values in loaded.items():
        if section not in config:
            logger.warning(f"Ignoring unknown config section '{section}' in {path}")
            continue
        if not isinstance(values, dict):
            raise ConfigurationError(f"{path}: section '{section}' must be an object")
        # Merge with defaults to ensure all keys exist
        config[section] = {**config[section], **values}

    return config


def log_level_from_env() -> int:
    """
    Resolve the log level from DYNRISK_LOG (also read from a .env file).

    Returns:
        logging level constant, INFO when unset or unrecognised
    """
    load_dotenv()
    name = os.getenv(LOG_ENV_VAR, "INFO").strip().upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        return logging.INFO
    return level


def configure_logging(out_dir: Optional[Path] = None) -> None:
    """
    Set up line-oriented logging to standard error, plus run.log inside out_dir.

    Args:
        out_dir: Output directory of the current command, if any
    """
    handlers = [logging.StreamHandler(sys.stderr)]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out_dir / "run.log", encoding="utf-8"))

    logging.basicConfig(level=log_level_from_env(), format=LOG_FORMAT, handlers=handlers, force=True)


def progress_enabled() -> bool:
    """tqdm bars only at INFO or more verbose, and only on a terminal."""
    return logging.getLogger().getEffectiveLevel() <= logging.INFO and sys.stderr.isatty()
