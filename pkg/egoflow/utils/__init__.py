"""
Utility modules for EgoFlow.

Provides settings, structured logging, error types and the dense-grid
file codecs shared by every command.
"""

from .config import Config, config
from .errors import EgoFlowError
from .logger import get_logger, setup_logging

__all__ = [
    "Config",
    "config",
    "EgoFlowError",
    "get_logger",
    "setup_logging",
]
