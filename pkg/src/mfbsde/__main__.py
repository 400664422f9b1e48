import sys

from mfbsde.cli import main

sys.exit(main())
