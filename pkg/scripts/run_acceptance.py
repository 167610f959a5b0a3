"""Run the acceptance criteria and print one PASS/FAIL line each.

    python scripts/run_acceptance.py            # all criteria
    python scripts/run_acceptance.py --only 1 2 10
"""
import argparse
import json
import sys
from dataclasses import asdict

from loctomo.acceptance import run_all


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--only", type=int, nargs="*")
    parser.add_argument("--json", help="also write results to this file")
    args = parser.parse_args()
    results = run_all(set(args.only) if args.only else None)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([asdict(r) for r in results], fh, indent=2, default=str)
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
