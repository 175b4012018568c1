"""Run every config in scripts/configs through the CLI and print a one-line summary each.

    python scripts/run_all.py [--out out]
"""

import argparse
import sys
from pathlib import Path

from psidolab.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    worst = 0
    for cfg in sorted((Path(__file__).parent / "configs").glob("*.json")):
        code = cli_main(["run", str(cfg), "--out", str(Path(args.out) / cfg.stem),
                         "--threads", str(args.threads)])
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
