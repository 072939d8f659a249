#!/usr/bin/env python3
"""Measure codebook utilization of a codec checkpoint on random motion.

Encodes a stream of random clips and reports how much of the product grid
the encoder actually reaches, per head and combined, plus the per-channel
level histograms. Useful when tuning the quantizer: collapsed channels
show up immediately as spiked histograms.
"""

import argparse
from collections import Counter

import numpy as np

from dancegen.codec import codebook_utilization, index_to_levels, load_codec
from dancegen.music import random_motion_clip


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--clips", type=int, default=50)
    ap.add_argument("--clip-frames", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = load_codec(args.ckpt)
    levels = model.cfg.levels
    k = model.cfg.codebook_size
    rng = np.random.default_rng(args.seed)

    heads = {"upper": [], "lower": []}
    for _ in range(args.clips):
        clip = random_motion_clip(rng, args.clip_frames)
        codes = model.encode(clip.frames)
        heads["upper"].append(codes.upper)
        heads["lower"].append(codes.lower)

    for name, arrays in heads.items():
        frac = codebook_utilization(arrays, k)
        print(f"{name}: {round(frac * k)}/{k} codes ({frac:.2%})")
        rows = index_to_levels(np.concatenate(arrays), levels)
        for ch, l in enumerate(levels):
            counts = Counter(rows[:, ch].tolist())
            hist = " ".join(f"{counts.get(v, 0) / rows.shape[0]:.2f}" for v in range(l))
            print(f"  ch{ch} (L={l}): {hist}")
    combined = codebook_utilization(heads["upper"] + heads["lower"], k)
    print(f"combined: {round(combined * k)}/{k} codes ({combined:.2%})")


if __name__ == "__main__":
    main()
