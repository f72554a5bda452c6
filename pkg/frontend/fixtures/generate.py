"""Regenerate aggregation_parity.json from the service's aggregators.

Run from the repository root:

    python3 frontend/fixtures/generate.py

The browser's what-if scoring re-implements the three aggregation
formulas; this fixture file is the contract keeping both sides within
1e-9 of each other.  The empty case encodes the no-detections policy
(score 0.0) rather than a formula value.
"""

import json
from pathlib import Path

import numpy as np

from dermscreen.scoring import AGGREGATORS, aggregate


def expected(probs):
    if not probs:
        return {kind: 0.0 for kind in AGGREGATORS}
    return {kind: aggregate(probs, kind) for kind in AGGREGATORS}


def main():
    cases = [
        [],
        [0.0],
        [1.0],
        [0.37],
        [1e-12],
        [1.0 - 1e-12],
        [0.2, 0.4],
        [0.5, 0.5],
        [0.9, 0.9],
        [0.0, 0.0],
        [1.0, 0.3],
        [0.999999, 0.999999],
        [0.1, 0.2, 0.3, 0.4, 0.5],
        [1 / 3, 1 / 7, 1 / 11],
    ]
    rng = np.random.default_rng(424242)
    for _ in range(36):
        n = int(rng.integers(2, 11))
        cases.append([float(p) for p in rng.uniform(0.0, 1.0, size=n)])

    payload = {
        "description": "per-lesion probability lists with the image-level "
        "values the service computes for each aggregator; empty list means "
        "the no-detections policy",
        "tolerance": 1e-9,
        "cases": [{"probs": probs, "expected": expected(probs)} for probs in cases],
    }
    out = Path(__file__).resolve().parent / "aggregation_parity.json"
    out.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {len(cases)} cases to {out}")


if __name__ == "__main__":
    main()
