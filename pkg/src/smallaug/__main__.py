import sys

from smallaug.cli import main

sys.exit(main())
