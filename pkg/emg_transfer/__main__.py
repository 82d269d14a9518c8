import sys

from emg_transfer.cli import main

sys.exit(main())
