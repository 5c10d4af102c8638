#!/usr/bin/env python

"""
See :mod:`blockland.workbench`.
"""

import sys

from blockland.workbench import main


if __name__ == "__main__":
    sys.exit(main())
