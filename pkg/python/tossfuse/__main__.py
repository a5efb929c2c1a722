import sys

from tossfuse.cli import main

sys.exit(main())
