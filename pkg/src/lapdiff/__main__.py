import sys

from lapdiff.cli import main

sys.exit(main())
