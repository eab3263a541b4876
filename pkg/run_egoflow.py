#!/usr/bin/env python3
"""
Startup script for EgoFlow.

Runs the command-line interface from a source checkout, e.g.

    python run_egoflow.py simulate --kind constant-plane --depth 5 --out runs/plane
"""

import sys
from pathlib import Path

# Add the egoflow package to the path
sys.path.insert(0, str(Path(__file__).parent))

from egoflow.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
