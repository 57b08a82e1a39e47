"""Experiment configs, output files and the commands behind the CLI.

Output schemas (every file starts with a ``# config_hash=...`` line):

``train.csv``      iteration, meta_loss, fraction_cell0..fraction_cell{L-1}
``results.csv``    model, task, shots, alpha, mean_loss, ci95, n_tasks,
                   iterations, seed, version, status
``fractions.csv``  order, cell, fraction, complement
``fits*.csv``      task, split, x, true_y, pre_y, post_y

Wall-clock times go to ``timing.csv`` sidecars so the files above are
byte-identical across runs with the same config and seed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import complement_fraction, expected_mask_fraction, network_mask_fraction
from .meta import MASK_EVAL_MODES, DivergenceError, MetaConfig, adapted_task_loss, evaluate, train
from .net import MODEL_KINDS, init_network, load_checkpoint, predict, save_checkpoint
from .tasks import TaskDistribution, dump_task, task_seed

PRESET_ITERATIONS = {True: 10_000, False: 70_000}  # keyed by desk_scale
SWEEP_ALPHAS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)
POLY_ORDERS = (0, 1, 2)
FIT_GRID = np.linspace(-5.0, 5.0, 101)
OUTPUT_ENV = "MTNET_OUTPUT_DIR"
RESULT_COLUMNS = ("model", "task", "shots", "alpha", "mean_loss", "ci95", "n_tasks", "iterations", "seed",
                  "version", "status")


class ConfigError(ValueError):
    """Invalid experiment configuration (a usage error)."""


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _optional_int(text):
    return None if text in (None, "", "none", "None") else int(text)


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a run.  ``iterations=None`` picks the preset."""

    model: str = "mtnet"
    task: str = "sinusoid"
    order: int = 0
    hidden: tuple[int, ...] = (40, 40)
    bias: bool = True
    k_shot: int = 10
    k_test: int = 10
    alpha: float = 1e-2
    beta: float = 1e-3
    inner_steps_train: int = 1
    inner_steps_eval: int = 1
    meta_batch: int = 4
    iterations: int | None = None
    temperature: float = 1.0
    mask_eval_mode: str = "sample"
    first_order: bool = False
    seed: int = 0
    eval_tasks: int = 600
    eval_shots: tuple[int, ...] = (5, 10, 20)
    log_every: int = 100
    desk_scale: bool = True
    output_dir: str = field(default_factory=default_output_dir)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {sorted(MODEL_KINDS)}, got {self.model!r}")
        if self.task not in ("sinusoid", "polynomial"):
            raise ConfigError(f"task must be sinusoid or polynomial, got {self.task!r}")
        if self.mask_eval_mode not in MASK_EVAL_MODES:
            raise ConfigError(f"mask_eval_mode must be one of {MASK_EVAL_MODES}")
        if not self.eval_shots or min(self.eval_shots) < 1:
            raise ConfigError("eval_shots must be a nonempty list of positive ints")
        if self.order < 0 or self.eval_tasks < 2 or self.log_every < 1 or self.k_shot < 1 or self.k_test < 1:
            raise ConfigError("order >= 0, eval_tasks >= 2, log_every, k_shot, k_test >= 1 required")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden}")
        try:
            self.meta_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def resolved_iterations(self) -> int:
        return PRESET_ITERATIONS[self.desk_scale] if self.iterations is None else self.iterations

    @property
    def layer_sizes(self) -> list[int]:
        return [1, *self.hidden, 1]

    def meta_config(self, **overrides) -> MetaConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(MetaConfig)}
        kw["iterations"] = self.resolved_iterations
        kw.update(overrides)
        return MetaConfig(**kw)

    def distribution(self, k_shot: int | None = None) -> TaskDistribution:
        return TaskDistribution(self.task, self.order, k_shot or self.k_shot, self.k_test)

    def to_text(self, include_output_dir: bool = True) -> str:
        """Flat ``key = value`` lines in field order, with iterations resolved."""
        lines = []
        for f in fields(self):
            if f.name == "output_dir" and not include_output_dir:
                continue
            val = self.resolved_iterations if f.name == "iterations" else getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(map(str, val))
            elif isinstance(val, bool):
                val = str(val).lower()
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        """Digest of everything but ``output_dir`` (where a run is written does not change it)."""
        return hashlib.sha256(self.to_text(include_output_dir=False).encode()).hexdigest()[:16]


_PARSERS = {
    "order": int, "hidden": _ints, "bias": _bool, "k_shot": int, "k_test": int, "alpha": float, "beta": float,
    "inner_steps_train": int, "inner_steps_eval": int, "meta_batch": int, "iterations": _optional_int,
    "temperature": float, "first_order": _bool, "seed": int, "eval_tasks": int, "eval_shots": _ints,
    "log_every": int, "desk_scale": _bool,
}
CONFIG_KEYS = tuple(f.name for f in fields(ExperimentConfig))


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key = value, got {raw!r}")
        out[key.strip()] = val.strip()
    return out


def make_config(values: dict | None = None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply string (or typed) ``values`` on top of ``base`` (defaults if None)."""
    values = dict(values or {})
    unknown = sorted(set(values) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    typed = {}
    for key, val in values.items():
        parse = _PARSERS.get(key)
        try:
            typed[key] = parse(val) if parse is not None and isinstance(val, str) else val
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {val!r}") from exc
    if "hidden" in typed or "eval_shots" in typed:
        typed = {k: (_ints(v) if k in ("hidden", "eval_shots") else v) for k, v in typed.items()}
    base = base if base is not None else ExperimentConfig()
    return replace(base, **typed)


def load_config(path) -> ExperimentConfig:
    return make_config(parse_config_text(Path(path).read_text()))


# -- file helpers ---------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, config_hash: str, header, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def _append_csv(path: Path, config_hash: str, header, rows) -> None:
    if not path.exists():
        _write_csv(path, config_hash, header, rows)
        return
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict[str, str]]:
    """Rows of one of our CSVs, skipping ``#`` lines."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _timing(out: Path, what: str, seconds: float) -> None:
    path = out / "timing.csv"
    new = not path.exists()
    with path.open("a") as fh:
        if new:
            fh.write("what,wall_seconds\n")
        fh.write(f"{what},{seconds:.3f}\n")


# -- records ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultRecord:
    model: str
    task: str
    shots: int
    alpha: float
    mean_loss: float
    ci95: float
    n_tasks: int
    iterations: int
    seed: int
    version: str = __version__
    status: str = "ok"
    wall_seconds: float = 0.0  # written to the timing sidecar, not results.csv

    def row(self) -> list:
        return [getattr(self, c) for c in RESULT_COLUMNS]


@dataclass
class TrainOutputs:
    directory: Path
    checkpoint: Path
    history: list[dict]
    failed: bool = False
    message: str = ""


# -- commands -----------------------------------------------------------------------------


def _prepare(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(config: ExperimentConfig, out_dir=None) -> TrainOutputs:
    """Meta-train one model; writes config.txt, train.csv, checkpoint.txt (or FAILED)."""
    out = _prepare(out_dir or config.output_dir)
    h = config.hash
    (out / "config.txt").write_text(f"# config_hash={h}\n" + config.to_text())
    for stale in ("FAILED", "checkpoint.txt"):
        (out / stale).unlink(missing_ok=True)
    network, params = init_network(config.layer_sizes, config.model, np.random.default_rng(config.seed),
                                   config.bias)
    n_cells = len(network.cells)
    header = ["iteration", "meta_loss"] + [f"fraction_cell{i}" for i in range(n_cells)]
    csv_path = out / "train.csv"
    _write_csv(csv_path, h, header, [])
    history: list[dict] = []

    def on_log(rec):
        history.append(rec)
        _append_csv(csv_path, h, header, [[rec["iteration"], rec["meta_loss"], *rec["fractions"]]])

    start = time.perf_counter()
    try:
        params, _ = train(network, params, config.distribution(), config.meta_config(), config.log_every, on_log)
    except DivergenceError as exc:
        (out / "FAILED").write_text(f"config_hash={h}\n{exc}\n")
        return TrainOutputs(out, out / "checkpoint.txt", history, failed=True, message=str(exc))
    _timing(out, "train", time.perf_counter() - start)
    ckpt = out / "checkpoint.txt"
    save_checkpoint(ckpt, network, params,
                    {"config_hash": h, "iterations": config.resolved_iterations, "seed": config.seed})
    return TrainOutputs(out, ckpt, history)


def cmd_eval(config: ExperimentConfig, checkpoint, alpha: float | None = None, out_dir=None,
             results_name: str = "results.csv") -> list[ResultRecord]:
    """Evaluate ``checkpoint`` at every K in ``config.eval_shots``; append to the results CSV."""
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    network, params, header = load_checkpoint(checkpoint)
    if network.kind != config.model:
        raise ConfigError(f"checkpoint holds a {network.kind!r} model but config says {config.model!r}")
    out = _prepare(out_dir or config.output_dir)
    mc = config.meta_config()
    a = mc.alpha if alpha is None else float(alpha)
    if a < 0:
        raise ConfigError(f"alpha override must be >= 0, got {a}")
    records = []
    for k in config.eval_shots:
        start = time.perf_counter()
        try:
            mean, ci = evaluate(network, params, config.distribution(k), mc, config.eval_tasks, alpha=a)
            status = "ok"
        except DivergenceError:
            mean, ci, status = float("nan"), float("nan"), "diverged"
        records.append(ResultRecord(
            config.model, config.distribution(k).describe(), k, a, mean, ci, config.eval_tasks,
            int(header.get("iterations", -1)), config.seed, status=status,
            wall_seconds=time.perf_counter() - start,
        ))
    _append_csv(out / results_name, config.hash, RESULT_COLUMNS, [r.row() for r in records])
    for r in records:
        _timing(out, f"eval_k{r.shots}_alpha{r.alpha!r}", r.wall_seconds)
    return records


def cmd_sweep_alpha(config: ExperimentConfig, alphas=SWEEP_ALPHAS, checkpoint=None) -> list[ResultRecord]:
    """Step-size robustness.

    With ``checkpoint`` this evaluates one trained model under each alpha
    override.  Without it a fresh model is meta-trained at each alpha (in
    ``output_dir/alpha_<a>``) and evaluated at that alpha.
    """
    out = _prepare(config.output_dir)
    records = []
    for a in alphas:
        if checkpoint is not None:
            records += cmd_eval(config, checkpoint, alpha=a, out_dir=out, results_name="sweep.csv")
            continue
        run_cfg = replace(config, alpha=float(a), output_dir=str(out / f"alpha_{a:g}"))
        res = cmd_train(run_cfg)
        if res.failed:
            rec = [ResultRecord(run_cfg.model, run_cfg.distribution(k).describe(), k, float(a), float("nan"),
                                float("nan"), run_cfg.eval_tasks, run_cfg.resolved_iterations, run_cfg.seed,
                                status="diverged") for k in run_cfg.eval_shots]
            _append_csv(out / "sweep.csv", config.hash, RESULT_COLUMNS, [r.row() for r in rec])
            records += rec
            continue
        records += cmd_eval(run_cfg, res.checkpoint, out_dir=out, results_name="sweep.csv")
    return records


def fit_dump(network, params, config: ExperimentConfig, n_tasks: int = 3, seed: int | None = None) -> list[list]:
    """Plot-ready rows: grid curves (true, pre and post adaptation) plus the train points."""
    dist = config.distribution()
    mc = config.meta_config()
    seed = config.seed if seed is None else seed
    rows = []
    for j in range(n_tasks):
        rng = task_seed(seed, 10_000 + j)
        task = dist.sample(rng)
        _, adapted = adapted_task_loss(network, params, task, dist, mc, rng=rng)
        for split, xs in (("grid", FIT_GRID), ("train", task.x_train)):
            pre = predict(network, params, dist.features(xs)).ravel()
            post = predict(network, adapted, dist.features(xs)).ravel()
            rows += [[j, split, x, t, p, q] for x, t, p, q in zip(xs, task(xs), pre, post)]
    return rows


FIT_COLUMNS = ("task", "split", "x", "true_y", "pre_y", "post_y")


def cmd_poly_complexity(config: ExperimentConfig, orders=POLY_ORDERS) -> tuple[Path, dict[int, float]]:
    """Train one model per polynomial order; write fractions.csv and per-order fit dumps.

    Returns the fractions path and the network-wide expected fraction per order.
    """
    if not MODEL_KINDS[config.model][1]:
        raise ConfigError(f"poly-complexity needs a masked model, got {config.model!r}")
    out = _prepare(config.output_dir)
    base = replace(config, task="polynomial")
    rows, overall = [], {}
    for order in orders:
        run_cfg = replace(base, order=order, output_dir=str(out / f"order_{order}"))
        res = cmd_train(run_cfg)
        if res.failed:
            raise DivergenceError(f"order {order}: {res.message}")
        network, params, _ = load_checkpoint(res.checkpoint)
        fr = expected_mask_fraction(network, params)
        comp = complement_fraction(network, params)
        rows += [[order, f"cell{i}", f, c] for i, (f, c) in enumerate(zip(fr, comp))]
        overall[order] = network_mask_fraction(network, params)
        rows.append([order, "all", overall[order], 1.0 - overall[order]])
        _write_csv(out / f"fits_order{order}.csv", run_cfg.hash, FIT_COLUMNS, fit_dump(network, params, run_cfg))
    path = out / "fractions.csv"
    rows.sort(key=lambda r: (r[1] == "all", r[1], r[0]))  # cells first, each with its orders in turn
    _write_csv(path, base.hash, ("order", "cell", "fraction", "complement"), rows)
    return path, overall


def cmd_dump_tasks(config: ExperimentConfig, n: int, out_dir=None) -> list[Path]:
    """Write ``n`` tasks from the configured distribution as individual CSV files."""
    out = _prepare(out_dir or Path(config.output_dir) / "tasks")
    dist = config.distribution()
    paths = []
    for j in range(n):
        p = out / f"task_{j:04d}.csv"
        p.write_text(f"# config_hash={config.hash}\n" + dump_task(dist.sample(task_seed(config.seed, j))))
        paths.append(p)
    return paths
