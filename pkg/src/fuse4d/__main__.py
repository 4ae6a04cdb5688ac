import sys

from fuse4d.cli import main

sys.exit(main())
