import sys

from dplrprop.cli import main

sys.exit(main())
