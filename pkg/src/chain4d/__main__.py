"""Module entry point: ``python -m chain4d`` runs the command group."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
