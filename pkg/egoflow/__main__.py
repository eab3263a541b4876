"""Allow `python -m egoflow`."""

import sys

from .cli import main

sys.exit(main())
