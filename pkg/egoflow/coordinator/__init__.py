"""
Coordinator module for running EgoFlow commands.

Turns resolved command settings into library calls, writes outputs and
the run manifest next to them.
"""

from .coordinator import Coordinator

__all__ = [
    "Coordinator",
]
