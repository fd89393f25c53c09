"""Allow ``python -m refusion_desk``."""
import sys

from .cli import main

sys.exit(main())
