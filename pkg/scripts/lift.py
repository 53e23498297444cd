"""Base vs augmented user-weighted AUC over several seeds of the default pipeline.

    python scripts/lift.py --seeds 0 1 2 3 4 --out /tmp/lift
"""

import argparse
import json
import time
from pathlib import Path

from mars import pipeline
from mars.config import load_config


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", type=Path, default=Path("lift-runs"))
    args = ap.parse_args()
    rows = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        report = pipeline.run_pipeline(load_config(args.config, seed=seed), args.out / f"seed{seed}", force=True)
        row = {"seed": seed, "secs": round(time.perf_counter() - t0, 1)}
        for seg in ("overall", "low", "mid", "high"):
            pick = (lambda r: r["overall"]) if seg == "overall" else (lambda r, s=seg: r["segments"][s])
            base = pick(report.runs[pipeline.BASE_RUN])["weighted_auc"]
            aug = pick(report.runs[pipeline.AUG_RUN])["weighted_auc"]
            row[seg] = {"base": round(base, 4), "lift": round(aug - base, 4)}
        rows.append(row)
        print(json.dumps(row), flush=True)
    wins = sum(r["overall"]["lift"] >= 0.01 for r in rows)
    print(f"overall lift >= 0.01 in {wins}/{len(rows)} seeds")


if __name__ == "__main__":
    main()
