"""Command-line entry point: ``python -m mtnet <subcommand> [options]``.

Settings resolve as defaults < ``--config`` file < explicit flags; the
output directory default can be overridden with ``MTNET_OUTPUT_DIR``.
Exit codes: 0 success, 1 usage, 2 numerical failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from . import verify as vf
from .meta import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    g = p.add_argument_group("experiment config (each mirrors a config key)")
    for key in ex.CONFIG_KEYS:
        g.add_argument("--" + key.replace("_", "-"), dest=key, metavar="V", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="meta-train one model")
    _config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint at each K in eval_shots")
    _config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alpha-override", type=float, default=None)

    p = sub.add_parser("sweep-alpha", help="step-size robustness sweep")
    _config_flags(p)
    p.add_argument("--alphas", default=",".join(f"{a:g}" for a in ex.SWEEP_ALPHAS))
    p.add_argument("--checkpoint", default=None, help="evaluate one model under each alpha instead of retraining")

    p = sub.add_parser("poly-complexity", help="mask fraction per polynomial order")
    _config_flags(p)
    p.add_argument("--orders", default=",".join(map(str, ex.POLY_ORDERS)))

    p = sub.add_parser("verify", help="randomised property and gradient-check suite")
    p.add_argument("--sizes", default="2,4,8,16")
    p.add_argument("--seeds", default="0")
    p.add_argument("--only", default=None, help="comma-separated property names")
    p.add_argument("--output", default=None, help="write JSON lines here as well as stdout")
    p.add_argument("--force-failure", action="store_true", help="perturb the delta-y identity by 1e-3")
    p.add_argument("--replay", nargs=4, metavar=("NAME", "SEED", "SIZE", "INSTANCE"), default=None)
    p.add_argument("--instance-scale", type=float, default=1.0)

    p = sub.add_parser("dump-tasks", help="write sampled tasks as CSV")
    _config_flags(p)
    p.add_argument("--n", type=int, default=10)
    return parser


def resolve_config(args) -> ex.ExperimentConfig:
    """Defaults < config file < flags.  ``eval`` without ``--config`` reuses the
    frozen config.txt next to the checkpoint, minus its output_dir."""
    values = {}
    if args.config:
        values = ex.parse_config_text(Path(args.config).read_text())
    elif getattr(args, "checkpoint", None) and (Path(args.checkpoint).parent / "config.txt").exists():
        values = ex.parse_config_text((Path(args.checkpoint).parent / "config.txt").read_text())
        values.pop("output_dir", None)
    values.update({k: getattr(args, k) for k in ex.CONFIG_KEYS if getattr(args, k) is not None})
    return ex.make_config(values)


def _announce(cfg: ex.ExperimentConfig) -> None:
    print(f"# config_hash={cfg.hash}", file=sys.stderr)
    sys.stderr.write("".join("#   " + line + "\n" for line in cfg.to_text().splitlines()))


def _print_records(records) -> None:
    for r in records:
        print(f"{r.model} {r.task} K={r.shots} alpha={r.alpha:g}: {r.mean_loss:.4f} +- {r.ci95:.4f} [{r.status}]")


def _run_verify(args) -> int:
    if args.replay:
        name, seed, size, inst = args.replay
        print(repr(vf.replay(name, int(seed), int(size), int(inst), args.force_failure)))
        return EXIT_OK
    records = vf.run_suite(
        sizes=tuple(int(s) for s in args.sizes.split(",")),
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        force_failure=args.force_failure,
        only=args.only.split(",") if args.only else None,
        instance_scale=args.instance_scale,
    )
    if not records:
        print("no properties selected", file=sys.stderr)
        return EXIT_USAGE
    text = "".join(r.to_json() + "\n" for r in records)
    sys.stdout.write(text)
    if args.output:
        Path(args.output).write_text(text)
    failed = [r for r in records if not r.passed]
    for r in failed:
        print(f"FAILED {r.name}: residual {r.max_residual:.3e} > {r.tolerance:.1e}; replay with "
              f"--replay {r.name} {r.worst_seed} {r.worst_size} {r.worst_instance}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "verify":
        return _run_verify(args)
    try:
        cfg = resolve_config(args)
    except (ex.ConfigError, OSError) as exc:
        print(f"mtnet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _announce(cfg)
    try:
        if args.command == "train":
            res = ex.cmd_train(cfg)
            if res.failed:
                print(f"mtnet: training diverged; partial outputs in {res.directory}: {res.message}", file=sys.stderr)
                return EXIT_NUMERIC
            print(res.checkpoint)
        elif args.command == "eval":
            records = ex.cmd_eval(cfg, args.checkpoint, alpha=args.alpha_override)
            _print_records(records)
            if any(r.status != "ok" for r in records):
                return EXIT_NUMERIC
        elif args.command == "sweep-alpha":
            alphas = [float(a) for a in args.alphas.split(",")]
            records = ex.cmd_sweep_alpha(cfg, alphas, args.checkpoint)
            _print_records(records)
            if any(r.status != "ok" for r in records):
                return EXIT_NUMERIC
        elif args.command == "poly-complexity":
            path, overall = ex.cmd_poly_complexity(cfg, [int(o) for o in args.orders.split(",")])
            for order, frac in overall.items():
                print(f"order {order}: network-wide expected mask fraction {frac:.4f}")
            print(path)
        elif args.command == "dump-tasks":
            for p in ex.cmd_dump_tasks(replace(cfg), args.n):
                print(p)
    except ex.ConfigError as exc:
        print(f"mtnet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"mtnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"mtnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
