import sys

from pyactqa.cli import main

sys.exit(main())
