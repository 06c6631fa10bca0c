import sys

from limbfit.cli import main

sys.exit(main())
