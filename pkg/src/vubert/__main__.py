import sys

from vubert.cli import main

sys.exit(main())
