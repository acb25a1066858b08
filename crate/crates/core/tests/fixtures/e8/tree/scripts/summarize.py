import json
import sys
from collections import Counter

import numpy as np


def summarize(path):
    with open(path) as f:
        rows = [json.loads(line) for line in f if line.strip()]
    valid = Counter(r["valid"] for r in rows)
    return {"runs": len(rows), "valid": valid[True], "mean_len": float(np.mean([len(r["input"]) for r in rows]))}


if __name__ == "__main__":
    print(json.dumps(summarize(sys.argv[1])))
