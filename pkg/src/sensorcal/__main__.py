import sys

from sensorcal.cli import main

sys.exit(main())
