"""Per-step cost of the sequential and parallel scan paths across lengths.

Thin wrapper over ``mat-forecast scan-bench``; prints the table and writes
<out>/scan_bench.csv.
"""

import sys

from mat_forecast.cli import main

if __name__ == "__main__":
    sys.exit(main(["scan-bench", *sys.argv[1:]]))
