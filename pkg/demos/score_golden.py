"""Score the golden measurement bundle and show how planner weights move the result.

    python3 demos/score_golden.py
"""

import copy
import json
from pathlib import Path

from idstream.metrics import parse_bundle, score_bundle

DATA = Path(__file__).resolve().parent.parent / "tests" / "data"


def main():
    doc = json.loads((DATA / "golden_bundle.json").read_text())
    report = score_bundle(parse_bundle(doc, DATA))
    print(report.summary())

    for planner in ([1] * 6, [5, 5, 5, 5, 5, 75], None):
        variant = copy.deepcopy(doc)
        variant["planner_raw"] = planner
        r = score_bundle(parse_bundle(variant, DATA))
        print(f"planner {planner}: overall {100 * r.overall:.2f}  notes {r.diagnostics['notes']}")


if __name__ == "__main__":
    main()
