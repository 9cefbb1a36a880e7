import sys

from implcorr.cli import main

sys.exit(main())
