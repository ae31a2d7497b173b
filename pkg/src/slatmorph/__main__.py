import sys

from slatmorph.cli import main

sys.exit(main())
