import sys

from lldc.harness import main

sys.exit(main())
