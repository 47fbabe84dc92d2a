import sys

from rlvr_lab.cli import main

sys.exit(main())
