"""
CLI module for the hand distillation laboratory.
Alternative entry point that delegates to __main__.
"""

import sys

from .__main__ import main

if __name__ == "__main__":
    sys.exit(main())
