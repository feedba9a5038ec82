#!/usr/bin/env python3
"""Check all guidance strategies against the exact-gradient oracles.

Thin wrapper over the `abds oracle-check` subcommand with a larger probe
budget; writes report.csv into --out and exits nonzero if any oracle
assertion fails.
"""

import sys

from abds.cli import main as cli_main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "oracle_out"
    sys.exit(cli_main(["oracle-check", "--out", out, "--probes", "20", "--seed", "0"]))
