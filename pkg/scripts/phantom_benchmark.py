"""Watershed and U-Net accuracy on randomized ellipse phantoms.

    python scripts/phantom_benchmark.py watershed --n 200 --size 64
    python scripts/phantom_benchmark.py unet --n 200 --epochs 30 --log run.csv

The U-Net run trains a depth-3, base-8 model with the default optimiser
settings and reports held-out metrics of the best-validation weights.
"""
import argparse
import logging
import time

import numpy as np

from skullstrip import image_core, metrics, phantoms, unet
from skullstrip.train import TrainConfig, train
from skullstrip.watershed import WatershedParams, segment_slice


def run_watershed(args):
    t0 = time.perf_counter()
    dices = []
    for img, truth in phantoms.phantom_set(args.n, args.size, args.seed, distractor=not args.no_distractor):
        dices.append(metrics.dice(segment_slice(img, WatershedParams()), truth))
    d = np.array(dices)
    print(f"{args.n} phantoms {args.size}x{args.size}: Dice min {d.min():.4f} "
          f"median {np.median(d):.4f} mean {d.mean():.4f}; {time.perf_counter() - t0:.1f}s")


def run_unet(args):
    t0 = time.perf_counter()
    data = [(image_core.normalize(i), m) for i, m in phantoms.phantom_set(args.n, args.size, args.seed)]
    model = unet.build_unet(args.depth, args.base, (args.size, args.size), seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, augment_fraction=args.augment)
    res = train(model, data, cfg)
    if args.log:
        with open(args.log, "w") as fh:
            fh.write(res.log_csv())
    r = res.final_report
    print(f"best epoch {res.best_epoch}: held-out F1 {r.f1:.4f} precision {r.precision:.4f} "
          f"recall {r.recall:.4f} BCE {r.bce:.5f}; {time.perf_counter() - t0:.0f}s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("mode", choices=("watershed", "unet"))
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-distractor", action="store_true")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--depth", type=int, default=3)
    ap.add_argument("--base", type=int, default=8)
    ap.add_argument("--augment", type=float, default=0.5)
    ap.add_argument("--log")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    (run_watershed if args.mode == "watershed" else run_unet)(args)


if __name__ == "__main__":
    main()
