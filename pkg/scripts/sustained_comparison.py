"""Sustained-use footprints compared with household appliances and a coach trip.

    python3 scripts/sustained_comparison.py --hours 3 --profiles configs/profiles.yaml
"""

from __future__ import annotations

import argparse

from xraybench import carbon
from xraybench.carbon import ProfileRegistry


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hours", type=float, default=carbon.SUSTAINED_HOURS)
    ap.add_argument("--profiles", help="YAML profiles file (merged over built-ins)")
    ap.add_argument("--baseline", default="coach")
    ap.add_argument("--csv", action="store_true", help="print CSV instead of a text table")
    args = ap.parse_args()
    registry = ProfileRegistry.load(args.profiles) if args.profiles else ProfileRegistry()
    table = carbon.sustained_comparison(registry, sorted(registry.profiles), args.hours, args.baseline)
    if args.csv:
        print(table.to_csv(), end="")
        return
    print(f"{'label':<18}{'gCO2eq':>12}{'ratio to ' + table.baseline:>20}")
    for row in table.rows:
        print(f"{row.label:<18}{carbon.format_sig(row.value_g):>12}{row.ratio_text():>20}")


if __name__ == "__main__":
    main()
