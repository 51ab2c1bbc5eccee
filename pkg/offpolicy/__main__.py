import sys

from offpolicy.bench_cli import cli_main

sys.exit(cli_main())
