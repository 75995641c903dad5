import sys

from s4lfsc.main import main

sys.exit(main())
