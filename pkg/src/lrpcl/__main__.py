import sys

from lrpcl.cli import main

sys.exit(main())
