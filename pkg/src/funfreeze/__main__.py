import sys

from funfreeze.cli import main

sys.exit(main())
