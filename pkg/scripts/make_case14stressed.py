"""Derive the rating-tightened 14-bus desk case used in the attack
consequence experiments. Starting from the bundled 14-bus case, all branch
ratings are scaled to 80 percent with a 5 percent emergency margin, and two
small loads are added on the 69 kV side (buses 7 and 8) so that every bus in
that region carries load and is therefore usable as attack support. The
result still clears a base-case contingency screen, but with far less
headroom: a well-placed load-redistribution attack can push a post-outage
flow past its emergency rating while the operator's cyber view stays clean.
"""

import json
import pathlib

HERE = pathlib.Path(__file__).resolve().parents[1] / "src/gridems/cases"

RATING_SCALE = 0.8
EMERGENCY_MARGIN = 1.05

EXTRA_LOADS = [
    {"bus": 7, "p": 12.0, "q": 3.0},
    {"bus": 8, "p": 10.0, "q": 2.0},
]


def build():
    doc = json.loads((HERE / "case14.json").read_text())
    for br in doc["branches"]:
        br["s_max"] = round(br["s_max"] * RATING_SCALE, 6)
        br["s_max_emergency"] = round(br["s_max"] * EMERGENCY_MARGIN, 6)
    next_id = max(d["id"] for d in doc["loads"]) + 1
    for extra in EXTRA_LOADS:
        doc["loads"].append({"id": next_id, "bus": extra["bus"],
                             "p": extra["p"], "q": extra["q"],
                             "sheddable": True})
        next_id += 1
    return doc


if __name__ == "__main__":
    out = HERE / "case14stressed.json"
    out.write_text(json.dumps(build(), indent=1))
    print(f"wrote {out}")
