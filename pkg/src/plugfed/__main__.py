import sys

from plugfed.cli import main

sys.exit(main())
