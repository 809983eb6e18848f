import sys

from cerkit.cli import main

sys.exit(main())
