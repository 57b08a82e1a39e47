"""Few-shot regression task distributions (sinusoid and polynomial)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

X_LOW, X_HIGH = -5.0, 5.0
AMPLITUDE_RANGE = (0.1, 5.0)
FREQUENCY_RANGE = (0.8, 1.2)
PHASE_RANGE = (0.0, np.pi)
COEF_RANGE = (-1.0, 1.0)


@dataclass(frozen=True)
class Task:
    """One regression task: noiseless train/test samples of a target function."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    descriptor: dict = field(default_factory=dict)

    @property
    def train(self) -> list[tuple[float, float]]:
        return list(zip(self.x_train.tolist(), self.y_train.tolist()))

    @property
    def test(self) -> list[tuple[float, float]]:
        return list(zip(self.x_test.tolist(), self.y_test.tolist()))

    def __call__(self, x) -> np.ndarray:
        return target_function(self.descriptor, x)


def target_function(descriptor: dict, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if descriptor["kind"] == "sinusoid":
        return descriptor["A"] * np.sin(descriptor["w"] * x + descriptor["b"])
    if descriptor["kind"] == "polynomial":
        # coefficients c0..cn, lowest order first
        return np.polynomial.polynomial.polyval(x, descriptor["coefs"])
    raise ValueError(f"unknown task kind {descriptor['kind']!r}")


def _inputs(rng, k_train, k_test):
    return rng.uniform(X_LOW, X_HIGH, size=k_train), rng.uniform(X_LOW, X_HIGH, size=k_test)


def sample_sinusoid_task(k_train: int, k_test: int, rng: np.random.Generator) -> Task:
    amp = rng.uniform(*AMPLITUDE_RANGE)
    freq = rng.uniform(*FREQUENCY_RANGE)
    phase = rng.uniform(*PHASE_RANGE)
    desc = {"kind": "sinusoid", "A": float(amp), "w": float(freq), "b": float(phase)}
    x_tr, x_te = _inputs(rng, k_train, k_test)
    return Task(x_tr, target_function(desc, x_tr), x_te, target_function(desc, x_te), desc)


def sample_polynomial_task(order: int, k_train: int, k_test: int, rng: np.random.Generator) -> Task:
    if order < 0:
        raise ValueError(f"polynomial order must be >= 0, got {order}")
    coefs = rng.uniform(*COEF_RANGE, size=order + 1)
    desc = {"kind": "polynomial", "order": int(order), "coefs": [float(c) for c in coefs]}
    x_tr, x_te = _inputs(rng, k_train, k_test)
    return Task(x_tr, target_function(desc, x_tr), x_te, target_function(desc, x_te), desc)


@dataclass(frozen=True)
class TaskDistribution:
    """p(T): a task family plus shot counts.

    ``augment_bias`` appends a constant-1 input feature, giving the first
    layer of a bias-free network affine capacity.  Networks built with cell
    biases (the default) do not need it.
    """

    kind: str = "sinusoid"
    order: int = 0
    k_train: int = 10
    k_test: int = 10
    augment_bias: bool = False

    def __post_init__(self):
        if self.kind not in ("sinusoid", "polynomial"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.k_train < 1 or self.k_test < 1:
            raise ValueError("k_train and k_test must be >= 1")

    @property
    def input_dim(self) -> int:
        return 2 if self.augment_bias else 1

    def with_shots(self, k_train: int) -> "TaskDistribution":
        return TaskDistribution(self.kind, self.order, k_train, self.k_test, self.augment_bias)

    def sample(self, rng: np.random.Generator) -> Task:
        if self.kind == "sinusoid":
            return sample_sinusoid_task(self.k_train, self.k_test, rng)
        return sample_polynomial_task(self.order, self.k_train, self.k_test, rng)

    def sample_batch(self, rng: np.random.Generator, n: int) -> list[Task]:
        return [self.sample(rng) for _ in range(n)]

    def features(self, x) -> np.ndarray:
        """Column-per-example input matrix of shape (input_dim, len(x))."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        if self.augment_bias:
            return np.vstack([x, np.ones_like(x)])
        return x

    def describe(self) -> str:
        return "sinusoid" if self.kind == "sinusoid" else f"polynomial{self.order}"


def task_seed(seed: int, index: int) -> np.random.Generator:
    """Independent stream for task ``index`` under master ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def _descriptor_line(desc: dict) -> str:
    parts = []
    for key, val in desc.items():
        if isinstance(val, list):
            val = ";".join(repr(v) for v in val)
        elif isinstance(val, float):
            val = repr(val)
        parts.append(f"{key}={val}")
    return "# " + " ".join(parts)


def dump_task(task: Task) -> str:
    """CSV text: a descriptor comment line, then ``split,x,y`` rows."""
    buf = io.StringIO()
    buf.write(_descriptor_line(task.descriptor) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "x", "y"])
    for split, xs, ys in (("train", task.x_train, task.y_train), ("test", task.x_test, task.y_test)):
        for x, y in zip(xs, ys):
            w.writerow([split, repr(float(x)), repr(float(y))])
    return buf.getvalue()


def load_task(text: str) -> Task:
    lines = [ln for ln in text.splitlines() if not ln.startswith("# config_hash=")]
    if not lines or not lines[0].startswith("# "):
        raise ValueError("task dump must start with a descriptor line")
    desc: dict = {}
    for item in lines[0][2:].split():
        key, val = item.split("=", 1)
        if key in ("kind",):
            desc[key] = val
        elif key == "order":
            desc[key] = int(val)
        elif key == "coefs":
            desc[key] = [float(v) for v in val.split(";")]
        else:
            desc[key] = float(val)
    rows = list(csv.DictReader(lines[1:]))
    pick = lambda split, col: np.array([float(r[col]) for r in rows if r["split"] == split])
    return Task(pick("train", "x"), pick("train", "y"), pick("test", "x"), pick("test", "y"), desc)
