import sys

from panelnn.cli import main

sys.exit(main())
