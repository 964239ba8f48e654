import sys

from charanim.cli import main

sys.exit(main())
