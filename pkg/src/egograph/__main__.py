import sys

from egograph.cli import main

sys.exit(main())
