"""Regenerate the checked-in skeleton/adjacency files from synthetic training data.

Usage: python scripts/build_skeletons.py [--samples 1000] [--seed 0]
"""
import argparse
from pathlib import Path

import numpy as np

from handfold.skeleton import LAYOUTS, build_skeleton, save_skeleton
from handfold.synth import synth_hands

OUT = Path(__file__).resolve().parents[1] / "src" / "handfold" / "data"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for name, layout in LAYOUTS.items():
        frames = synth_hands(args.samples, seed=args.seed, layout=layout)
        gt = np.stack([f.gt_joints for f in frames])
        prior = build_skeleton(gt, layout, n_samples=args.samples, seed=args.seed)
        save_skeleton(prior, OUT / f"{name}.skel", OUT / f"{name}.adj")
        print(f"{name}: J={layout.num_joints} written")


if __name__ == "__main__":
    main()
