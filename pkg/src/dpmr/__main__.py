import sys

from dpmr.cli import main

sys.exit(main())
