import sys

from prguide.cli import main

sys.exit(main())
