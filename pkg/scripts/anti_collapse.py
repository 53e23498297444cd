"""Mean pairwise distance of exported item embeddings for several entropy weights.

    python scripts/anti_collapse.py --seeds 0 1 2 --lams 0 0.1 0.5
"""

import argparse
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from mars import alignment, dataio, pipeline
from mars.config import load_config


def mean_pairwise_distance(m: np.ndarray) -> float:
    sq = np.sum(m * m, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * m @ m.T, 0.0)
    return float(np.sqrt(d2)[np.triu_indices(m.shape[0], 1)].mean())


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lams", type=float, nargs="+", default=[0.0, 0.1])
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    dist = {lam: [] for lam in args.lams}
    for seed in args.seeds:
        cfg = load_config(args.config, seed=seed)
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            pipeline.run_synth(cfg, out)
            split = pipeline.load_split(out, cfg)
            features = dataio.load_items(out / pipeline.ITEMS)
        for lam in args.lams:
            model, _ = alignment.train_alignment(split, features, replace(cfg.alignment, lam=lam))
            dist[lam].append(mean_pairwise_distance(alignment.catalog_item_embeddings(model)))
            print(f"seed {seed} lambda {lam:g}: {dist[lam][-1]:.4f}", flush=True)
    for lam, ds in dist.items():
        print(f"lambda {lam:g}: mean {np.mean(ds):.4f}")


if __name__ == "__main__":
    main()
