import sys

from gpsdf.cli import main

sys.exit(main())
