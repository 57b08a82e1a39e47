"""Few-shot sinusoid regression: every model kind at K = 5, 10, 20.

    python scripts/run_table1.py [--full] [--models maml,tnet,mtnet] [--out runs/table1]

Desk scale (default) trains for 10k meta-iterations per model, --full for 70k.
Results accumulate in <out>/results.csv.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from mtnet import experiment as ex

MODELS = ("maml", "mnet_full", "mnet", "tnet", "mtnet_full", "mtnet")

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--full", action="store_true")
parser.add_argument("--models", default=",".join(MODELS))
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--out", default=str(Path(ex.default_output_dir()) / "table1"))
args = parser.parse_args()

base = ex.make_config({"desk_scale": not args.full, "seed": args.seed, "output_dir": args.out})
for model in args.models.split(","):
    cfg = replace(base, model=model, output_dir=str(Path(args.out) / model))
    res = ex.cmd_train(cfg)
    if res.failed:
        print(f"{model}: diverged ({res.message})")
        continue
    for r in ex.cmd_eval(cfg, res.checkpoint, out_dir=args.out):
        print(f"{model:>10}  K={r.shots:<2}  {r.mean_loss:.3f} +- {r.ci95:.3f}")
