import sys

from segqc.cli import main

sys.exit(main())
