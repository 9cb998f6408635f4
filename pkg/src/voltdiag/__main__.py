import sys

from voltdiag.cli_report import main

sys.exit(main())
