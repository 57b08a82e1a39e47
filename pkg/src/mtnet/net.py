"""Cells and feedforward networks built from them.

A cell maps ``x -> T @ W @ x``.  ``W`` is adapted per task, ``T`` and the
mask logits ``zeta`` are shared across tasks.  Hidden cells are followed by
ReLU, the last cell is linear.  With ``bias`` set (the default) every cell
input gets a constant-1 row appended, so the last column of ``W`` is a bias
that is adapted, masked and transformed by ``T`` like any other weight.

Parameters are kept apart from the structure, in an ordered ``dict`` keyed
``"cell{i}.W"``, ``"cell{i}.T"`` and ``"cell{i}.zeta"``, so adapted values can
be substituted freely.  Only the keys a model kind actually uses are present.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Node, ShapeError, Tape

# kind -> (has_T, has_mask, mask granularity)
MODEL_KINDS = {
    "maml": (False, False, "row"),
    "tnet": (True, False, "row"),
    "mnet": (False, True, "row"),
    "mtnet": (True, True, "row"),
    "mnet_full": (False, True, "weight"),
    "mtnet_full": (True, True, "weight"),
}

INIT_STD = 1e-2
ZETA_SATURATION = 50.0


@dataclass(frozen=True)
class Cell:
    n_in: int
    n_out: int
    has_T: bool = False
    has_mask: bool = False
    mask_granularity: str = "row"
    bias: bool = True

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError(f"cell dimensions must be positive, got {self.n_in}->{self.n_out}")
        if self.mask_granularity not in ("row", "weight"):
            raise ValueError(f"unknown mask granularity {self.mask_granularity!r}")

    @property
    def w_shape(self) -> tuple[int, int]:
        return (self.n_out, self.n_in + int(self.bias))

    @property
    def zeta_shape(self) -> tuple[int, int]:
        return (self.n_out, 1) if self.mask_granularity == "row" else self.w_shape


@dataclass(frozen=True)
class Network:
    cells: tuple[Cell, ...]
    kind: str = "maml"

    def __post_init__(self):
        if not self.cells:
            raise ValueError("network needs at least one cell")
        for i, (a, b) in enumerate(zip(self.cells, self.cells[1:])):
            if a.n_out != b.n_in:
                raise ShapeError(f"cell{i} outputs {a.n_out} but cell{i + 1} expects {b.n_in}")

    @classmethod
    def build(cls, layer_sizes, kind: str, bias: bool = True) -> "Network":
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_KINDS)}")
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs an input and an output size")
        if min(sizes) < 1:
            raise ValueError(f"zero-sized layer in {sizes}")
        has_T, has_mask, gran = MODEL_KINDS[kind]
        cells = tuple(Cell(i, o, has_T, has_mask, gran, bias) for i, o in zip(sizes, sizes[1:]))
        return cls(cells, kind)

    @property
    def bias(self) -> bool:
        return self.cells[0].bias

    @property
    def layer_sizes(self) -> list[int]:
        return [self.cells[0].n_in] + [c.n_out for c in self.cells]

    def param_keys(self) -> list[str]:
        keys = []
        for i, c in enumerate(self.cells):
            keys.append(f"cell{i}.W")
            if c.has_T:
                keys.append(f"cell{i}.T")
            if c.has_mask:
                keys.append(f"cell{i}.zeta")
        return keys

    def param_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {}
        for i, c in enumerate(self.cells):
            shapes[f"cell{i}.W"] = c.w_shape
            if c.has_T:
                shapes[f"cell{i}.T"] = (c.n_out, c.n_out)
            if c.has_mask:
                shapes[f"cell{i}.zeta"] = c.zeta_shape
        return shapes


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) redrawn until every entry lies within ``bound`` stds."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def init_network(layer_sizes, model_kind: str, rng: np.random.Generator, bias: bool = True):
    """Build a network and its initial parameters: W ~ truncated normal, T = I, zeta = 0.

    Bias columns start at zero.
    """
    network = Network.build(layer_sizes, model_kind, bias)
    params: dict[str, np.ndarray] = {}
    for i, c in enumerate(network.cells):
        w = truncated_normal(rng, (c.n_out, c.n_in), INIT_STD)
        params[f"cell{i}.W"] = np.hstack([w, np.zeros((c.n_out, 1))]) if c.bias else w
        if c.has_T:
            params[f"cell{i}.T"] = np.eye(c.n_out)
        if c.has_mask:
            params[f"cell{i}.zeta"] = np.zeros(c.zeta_shape)
    return network, params


def check_params(network: Network, params: dict) -> None:
    for key, shape in network.param_shapes().items():
        if key not in params:
            raise KeyError(f"missing parameter {key}")
        got = np.shape(params[key].value if isinstance(params[key], Node) else params[key])
        if tuple(got) != shape:
            raise ShapeError(f"{key}: expected shape {shape}, got {tuple(got)}")


def forward(tape: Tape, network: Network, params: dict[str, Node], x: Node) -> Node:
    """Network output for the column-per-example input ``x``, recorded on ``tape``."""
    if x.value.shape[0] != network.cells[0].n_in:
        raise ShapeError(f"input has {x.value.shape[0]} features, network expects {network.cells[0].n_in}")
    h = x
    last = len(network.cells) - 1
    for i, cell in enumerate(network.cells):
        if cell.bias:
            h = tape.append_row(h, 1.0)
        h = tape.matmul(params[f"cell{i}.W"], h)
        if cell.has_T:
            h = tape.matmul(params[f"cell{i}.T"], h)
        if i < last:
            h = tape.relu(h)
    return h


def predict(network: Network, params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Plain-array forward pass."""
    tape = Tape()
    nodes = {k: tape.constant(v) for k, v in params.items()}
    return forward(tape, network, nodes, tape.constant(x)).value


def mask_probability(zeta) -> np.ndarray:
    """P(mask entry = 1) = exp(zeta) / (exp(zeta) + 1)."""
    z = np.asarray(zeta, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _logits(zeta) -> np.ndarray:
    z = np.asarray(zeta, dtype=np.float64)
    return z.reshape(-1, 1) if z.ndim <= 1 else z


def _widen(mask: np.ndarray, n_in: int | None) -> np.ndarray:
    if n_in is not None and mask.shape[1] == 1:
        return np.repeat(mask, n_in, axis=1)
    return mask


def sample_mask_hard(zeta, rng: np.random.Generator, n_in: int | None = None) -> np.ndarray:
    """Binary mask, each logit entry on with probability sigmoid(zeta).

    A column of row logits gives a row-constant mask, widened to ``n_in``
    columns when given.
    """
    z = _logits(zeta)
    mask = (rng.random(z.shape) < mask_probability(z)).astype(np.float64)
    return _widen(mask, n_in)


def threshold_mask(zeta, n_in: int | None = None) -> np.ndarray:
    z = _logits(zeta)
    return _widen((mask_probability(z) > 0.5).astype(np.float64), n_in)


def relaxed_mask(tape: Tape, zeta: Node, temperature: float, n_in: int, noise=None) -> Node:
    """Relaxed Bernoulli mask node, broadcast across each row for row logits."""
    m = tape.gumbel_bernoulli(zeta, temperature, noise=noise)
    if m.value.shape[1] == 1 and n_in != 1:
        m = tape.broadcast_row(m, n_in)
    return m


def sample_mask_relaxed(zeta, temperature: float, rng: np.random.Generator, n_in: int | None = None) -> np.ndarray:
    z = _logits(zeta)
    tape = Tape(rng=rng)
    return relaxed_mask(tape, tape.constant(z), temperature, n_in or z.shape[1]).value


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, network: Network, params: dict[str, np.ndarray], header: dict | None = None) -> None:
    """Text checkpoint: ``key rows cols v0 v1 ...`` per parameter, row-major.

    Floats are written with ``repr``, which round-trips doubles exactly.
    """
    lines = [
        f"# kind={network.kind}",
        "# layer_sizes=" + ",".join(map(str, network.layer_sizes)),
        f"# bias={int(network.bias)}",
    ]
    for key, val in (header or {}).items():
        lines.append(f"# {key}={val}")
    for key in network.param_keys():
        arr = np.asarray(params[key], dtype=np.float64)
        vals = " ".join(repr(float(v)) for v in arr.reshape(-1))
        lines.append(f"{key} {arr.shape[0]} {arr.shape[1]} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(network, params, header)``."""
    header: dict[str, str] = {}
    params: dict[str, np.ndarray] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            header[key] = val
            continue
        key, rows, cols, *vals = line.split()
        arr = np.array([float(v) for v in vals], dtype=np.float64)
        params[key] = arr.reshape(int(rows), int(cols))
    sizes = [int(s) for s in header.pop("layer_sizes").split(",")]
    network = Network.build(sizes, header.pop("kind"), bool(int(header.pop("bias", "1"))))
    check_params(network, params)
    return network, params, header
