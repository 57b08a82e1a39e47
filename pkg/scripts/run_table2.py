"""Step-size robustness: meta-train and evaluate (K = 10) at each inner step size.

    python scripts/run_table2.py [--full] [--models maml,tnet,mtnet] [--alphas 1e-4,...,10]
"""

import argparse
from dataclasses import replace
from pathlib import Path

from mtnet import experiment as ex

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--full", action="store_true")
parser.add_argument("--models", default="maml,tnet,mtnet")
parser.add_argument("--alphas", default=",".join(f"{a:g}" for a in ex.SWEEP_ALPHAS))
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default=str(Path(ex.default_output_dir()) / "table2"))
args = parser.parse_args()

alphas = [float(a) for a in args.alphas.split(",")]
base = ex.make_config({"desk_scale": not args.full, "seed": args.seed, "eval_shots": "10"})
for model in args.models.split(","):
    cfg = replace(base, model=model, output_dir=str(Path(args.out) / model))
    for r in ex.cmd_sweep_alpha(cfg, alphas):
        print(f"{model:>6}  alpha={r.alpha:<7g} {r.mean_loss:.3f} +- {r.ci95:.3f}  [{r.status}]")
