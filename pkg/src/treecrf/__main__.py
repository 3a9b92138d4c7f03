import sys

from treecrf.cli import main

sys.exit(main())
