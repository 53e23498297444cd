"""Compare augmentation strategies on one synthetic dataset and one alignment model.

    python scripts/strategies.py --seed 0 --out /tmp/strategies
"""

import argparse
from pathlib import Path

from mars import pipeline, retrieval
from mars.config import load_config


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", type=Path, default=Path("strategy-runs"))
    args = ap.parse_args()
    cfg = load_config(args.config, seed=args.seed)
    out = args.out
    pipeline.run_synth(cfg, out, force=True)
    pipeline.run_align(cfg, out, force=True)
    pipeline.run_train(cfg, out, augment=False, force=True)
    for strategy in retrieval.STRATEGIES:
        cfg.augment.strategy = strategy
        pipeline.run_augment(cfg, out, force=True)
        pipeline.run_train(cfg, out, force=True, name=strategy)
    report = pipeline.run_eval(cfg, out, force=True)
    print(report.table())


if __name__ == "__main__":
    main()
