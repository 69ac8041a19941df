import sys

from mmfex.cli import main

sys.exit(main())
