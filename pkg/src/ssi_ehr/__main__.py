import sys

from ssi_ehr.cli import main

sys.exit(main())
