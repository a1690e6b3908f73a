import sys

from maxent_seg.cli import main

sys.exit(main())
