"""Print mean/min/max final objective per (problem, algorithm) from result JSONs."""
import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np


def main(root):
    groups = defaultdict(list)
    for path in sorted(Path(root).glob("*.json")):
        r = json.loads(path.read_text())
        tag = r["algorithm"] + ("+select" if r["params"]["select_generation"] else "")
        groups[(r["problem"], tag)].append(r)
    for (problem, tag), runs in sorted(groups.items()):
        vals = [r["objective"] for r in runs if r["feasible"]]
        feas = f"{len(vals)}/{len(runs)} feasible"
        if vals:
            print(f"{problem:16s} {tag:11s} mean {np.mean(vals):10.3f}  min {min(vals):10.3f}  "
                  f"max {max(vals):10.3f}  {feas}")
        else:
            print(f"{problem:16s} {tag:11s} {feas}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "results")
