"""Mask fraction versus task complexity: MT-net on polynomials of order 0, 1, 2.

    python scripts/run_poly.py [--full] [--model mtnet] [--out runs/poly]

Writes fractions.csv plus fits_order<k>.csv curve dumps for plotting.
"""

import argparse
from pathlib import Path

from mtnet import experiment as ex

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--full", action="store_true")
parser.add_argument("--model", default="mtnet")
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default=str(Path(ex.default_output_dir()) / "poly"))
args = parser.parse_args()

cfg = ex.make_config({"model": args.model, "desk_scale": not args.full, "seed": args.seed, "output_dir": args.out})
path, overall = ex.cmd_poly_complexity(cfg)
for order, frac in overall.items():
    print(f"order {order}: expected fraction of rows updated {frac:.4f}")
print(f"per-cell fractions in {path}")
