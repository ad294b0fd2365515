"""Train the default g=4 two-layer net on blobs for several seeds and report median test accuracy.

    python scripts/toy_regression.py --seeds 5 --out runs/toy
"""
import argparse
import os
import time

import numpy as np

from genesnn.config import default_config, load_config
from genesnn.experiments import TOY_CSV_HEADER, toy_regression, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON config (defaults to the built-in blob setup)")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else default_config()
    os.makedirs(args.out, exist_ok=True)
    start = time.perf_counter()
    accs, rows = [], []
    for seed in range(args.seeds):
        post, r = toy_regression(cfg, seed, args.epochs)
        accs.append(post.test_accuracy)
        rows.extend(r)
        print(f"seed {seed}: test_accuracy={post.test_accuracy:.4f} val_loss={post.val_loss:.6g}")
    write_csv(os.path.join(args.out, "toy_regression.csv"), TOY_CSV_HEADER, rows)
    print(f"median test accuracy {np.median(accs):.4f} over {args.seeds} seeds "
          f"in {time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
