"""Toy-scale ablation: evolve under each fitness variant, post-train, compare median validation loss.

    python scripts/ablation.py --seeds 5 --post-epochs 20 --out runs/ablation
"""
import argparse
import time

from genesnn.config import ABLATIONS, default_config, load_config
from genesnn.experiments import run_ablation

ORDER = [("ste", "baseline_r1"), ("ste", "baseline_r2"), ("baseline_r1", "baseline"),
         ("baseline_r2", "baseline")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON config (defaults to the built-in blob setup)")
    ap.add_argument("--variants", nargs="+", choices=ABLATIONS,
                    default=["random", "baseline", "baseline_r1", "baseline_r2", "ste"])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--post-epochs", type=int, default=20)
    ap.add_argument("--tie", type=float, default=0.01, help="median gap treated as a tie")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else default_config()
    start = time.perf_counter()
    _, med = run_ablation(cfg, args.variants, range(args.seeds), args.post_epochs, log_dir=args.out,
                          progress=lambda row: print(" ".join(str(v) for v in row), flush=True))
    print(f"finished in {time.perf_counter() - start:.0f}s")
    for v in args.variants:
        print(f"{v:12s} median val loss {med[v]:.6f}")
    for lo, hi in ORDER:
        if lo in med and hi in med:
            gap = med[hi] - med[lo]
            kind = "margin" if gap > args.tie else "tie" if gap >= -args.tie else "VIOLATED"
            print(f"{lo} <= {hi}: {kind} ({gap:+.4f})")


if __name__ == "__main__":
    main()
