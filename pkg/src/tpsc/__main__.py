import sys
from tpsc.cli import main
sys.exit(main())
