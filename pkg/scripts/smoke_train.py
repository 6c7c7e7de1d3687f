"""Train the full variant once and report how far the episode return moved.

    python scripts/smoke_train.py --epochs 200 --episodes 4 --out runs/smoke
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from etcomm import harness
from etcomm.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--episodes", type=int, default=4, help="episodes collected per epoch")
    args = ap.parse_args()

    cfgs = load_config(args.config)
    cfgs = replace(cfgs, train=replace(cfgs.train, seed=args.seed, episodes_per_epoch=args.episodes))
    rec = harness.train_one(cfgs, "full", Path(args.out), epochs=args.epochs)
    R = np.array([r["episode_return"] for r in rec.rows])
    window = min(10, len(R))
    gain, spread = R[-window:].mean() - R[:window].mean(), np.ptp(R)
    print(f"first {R[:window].mean():.1f}  last {R[-window:].mean():.1f}  spread {spread:.1f}")
    print(f"gain / spread = {gain / spread if spread else float('nan'):.2f}")
    harness.plot([rec], args.out)


if __name__ == "__main__":
    main()
