"""Apply the carbon model to the published median times and print the comparison.

    python3 scripts/reference_checks.py [--json out.json]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from xraybench import reference


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--json", type=Path, help="also write the raw checks as JSON")
    args = ap.parse_args()
    refs = reference.reference_checks()
    print(reference.render_markdown(refs))
    if args.json:
        args.json.write_text(json.dumps(refs, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
