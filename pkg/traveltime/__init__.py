"""
Streaming travel-time estimation on road networks.

Per-link travel times are modelled as independent Gamma distributions whose
parameters are learned online, by expectation maximization, from sparse
trajectory measurements. See `traveltime.cli` for the command-line entry
points.
"""
from __future__ import annotations

import logging
from typing import Optional

from traveltime.config import Config, current_config

__version__ = "0.1.0"

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


def create_app(config_class: Optional[type] = None, log_level: Optional[str] = None) -> type:
    """Configure process-wide logging and return the active configuration class.

    Args:
        config_class: Configuration class to use (defaults to the one `APP_ENV` selects).
        log_level: Overrides the class' LOG_LEVEL.

    Returns:
        The configuration class in effect.
    """
    config_class = config_class if config_class is not None else current_config
    level = (log_level or config_class.LOG_LEVEL or Config.LOG_LEVEL).upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    logging.getLogger(__name__).debug(f"{config_class.APP_NAME} {__version__} configured with {config_class.__name__}")
    return config_class
