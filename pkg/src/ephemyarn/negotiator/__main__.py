import sys

from .server import rm_main

sys.exit(rm_main())
