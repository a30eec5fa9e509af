import sys

from kidney_incentives.cli import main

sys.exit(main())
