import sys

from qaq.cli import main

sys.exit(main())
