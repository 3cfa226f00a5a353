# SPDX-License-Identifier: GPL-3.0-only

import sys

from cli import main

if __name__ == "__main__":
    sys.exit(main())
