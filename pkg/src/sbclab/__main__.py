import sys

from sbclab.cli import main

sys.exit(main())
