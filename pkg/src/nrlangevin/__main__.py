"""Allow running as ``python -m nrlangevin``."""

import sys

from nrlangevin.main import main

sys.exit(main())
