import sys

from robustmil.cli import main

sys.exit(main())
