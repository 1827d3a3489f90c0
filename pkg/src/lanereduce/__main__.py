import sys

from lanereduce.cli import main

sys.exit(main())
