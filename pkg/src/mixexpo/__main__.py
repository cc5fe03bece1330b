import sys

from mixexpo.cli import main

sys.exit(main())
