import sys

from drlkit.main import main

sys.exit(main())
