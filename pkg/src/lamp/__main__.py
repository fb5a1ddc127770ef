"""Allow running the command-line interface as ``python -m lamp``."""

import sys

from lamp.cli import main

if __name__ == "__main__":
    sys.exit(main())
