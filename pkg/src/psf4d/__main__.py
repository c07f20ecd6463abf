"""Module entry point so ``python -m psf4d`` matches the installed script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
