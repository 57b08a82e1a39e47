"""Inner-loop adaptation, meta-gradients and the meta-training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from .autodiff import Node, NonFiniteError, Tape, grad
from .net import Network, check_params, forward, relaxed_mask, sample_mask_hard, threshold_mask
from .tasks import Task, TaskDistribution

log = logging.getLogger(__name__)

MASK_EVAL_MODES = ("sample", "threshold", "relaxed")
_EVAL_STREAM = 1


class DivergenceError(NonFiniteError):
    """A loss went non-finite during adaptation or meta-training."""


@dataclass
class MetaConfig:
    alpha: float = 1e-2
    beta: float = 1e-3
    inner_steps_train: int = 1
    inner_steps_eval: int = 1
    meta_batch: int = 4
    iterations: int = 10_000
    temperature: float = 1.0
    mask_eval_mode: str = "sample"
    first_order: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha", "beta", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("inner_steps_train", "inner_steps_eval", "meta_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.mask_eval_mode not in MASK_EVAL_MODES:
            raise ValueError(f"mask_eval_mode must be one of {MASK_EVAL_MODES}, got {self.mask_eval_mode!r}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        """One bias-corrected Adam step on the keys in ``grads``; returns new params."""
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        out = dict(params)
        for key, g in grads.items():
            m = self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            v = self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            out[key] = params[key] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


# -- inner loop --------------------------------------------------------------


def adapt(
    tape: Tape,
    network: Network,
    nodes: dict[str, Node],
    x: Node,
    y: Node,
    alpha: float,
    steps: int,
    masks: dict[int, Node] | None = None,
    create_graph: bool = True,
) -> dict[str, Node]:
    """``steps`` full-batch gradient steps on every W; T and zeta pass through.

    ``masks[i]`` gates the gradient of cell i elementwise.  With
    ``create_graph`` the steps stay differentiable w.r.t. the initial nodes.
    """
    masks = masks or {}
    current = dict(nodes)
    w_keys = [f"cell{i}.W" for i in range(len(network.cells))]
    for _ in range(steps):
        loss = tape.mse_loss(forward(tape, network, current, x), y)
        grads = grad(tape, loss, [current[k] for k in w_keys], create_graph=create_graph)
        for i, (key, g) in enumerate(zip(w_keys, grads)):
            if i in masks:
                g = tape.hadamard(masks[i], g)
            current[key] = tape.sub(current[key], tape.scale(g, alpha))
    return current


def _inner_update(network, params, task_train, alpha, steps, masks=None):
    x, y = task_train
    y = np.asarray(y, dtype=np.float64)
    y = y.reshape(1, -1) if y.ndim < 2 else y  # 1-D targets: one output, one column per example
    tape = Tape()
    nodes = {k: tape.variable(v) for k, v in params.items()}
    mask_nodes = {i: tape.constant(m) for i, m in (masks or {}).items()}
    try:
        out = adapt(tape, network, nodes, tape.constant(x), tape.constant(y),
                    alpha, steps, mask_nodes, create_graph=False)
    except NonFiniteError as exc:
        raise DivergenceError(f"inner update diverged (alpha={alpha}, steps={steps}): {exc}", op=exc.op) from exc
    return {k: n.value for k, n in out.items()}


def inner_update_maml(network: Network, params, task_train, alpha: float, steps: int = 1):
    """Plain gradient descent on W.  ``task_train`` is ``(x_features, y)``."""
    if any(c.has_T or c.has_mask for c in network.cells):
        raise ValueError(f"inner_update_maml needs a plain network, got kind {network.kind!r}")
    return _inner_update(network, params, task_train, alpha, steps)


def inner_update_tnet(network: Network, params, task_train, alpha: float, steps: int = 1):
    if not all(c.has_T for c in network.cells):
        raise ValueError(f"inner_update_tnet needs T matrices, got kind {network.kind!r}")
    return _inner_update(network, params, task_train, alpha, steps)


def inner_update_mtnet(network: Network, params, task_train, alpha: float, steps: int, mask_per_cell):
    """Masked update ``W - alpha * M * dL/dW``; one fixed mask per cell for all steps."""
    masks = dict(enumerate(mask_per_cell)) if not isinstance(mask_per_cell, dict) else dict(mask_per_cell)
    for i, m in masks.items():
        if np.shape(m) != network.cells[i].w_shape:
            raise ValueError(f"mask for cell{i} has shape {np.shape(m)}, expected {network.cells[i].w_shape}")
    return _inner_update(network, params, task_train, alpha, steps, masks)


# -- meta-gradient -------------------------------------------------------------


def _task_io(tape, dist, task):
    return (
        tape.constant(dist.features(task.x_train)),
        tape.constant(task.y_train.reshape(1, -1)),
        tape.constant(dist.features(task.x_test)),
        tape.constant(task.y_test.reshape(1, -1)),
    )


def task_test_loss(
    tape: Tape,
    network: Network,
    nodes: dict[str, Node],
    task: Task,
    dist: TaskDistribution,
    config: MetaConfig,
    detach_mask: bool = False,
    fixed_masks: dict[int, np.ndarray] | None = None,
) -> Node:
    """Post-adaptation test loss of one task, differentiable w.r.t. ``nodes``.

    Masked cells draw a relaxed mask from the tape's stream unless
    ``fixed_masks`` supplies one.  ``detach_mask`` cuts the zeta path.
    """
    x_tr, y_tr, x_te, y_te = _task_io(tape, dist, task)
    masks = {}
    for i, cell in enumerate(network.cells):
        if not cell.has_mask:
            continue
        if fixed_masks is not None and i in fixed_masks:
            masks[i] = tape.constant(fixed_masks[i])
            continue
        zeta = nodes[f"cell{i}.zeta"]
        if detach_mask:
            zeta = tape.constant(zeta.value)
        masks[i] = relaxed_mask(tape, zeta, config.temperature, cell.w_shape[1])
    adapted = adapt(tape, network, nodes, x_tr, y_tr, config.alpha, config.inner_steps_train, masks,
                    create_graph=not config.first_order)
    return tape.mse_loss(forward(tape, network, adapted, x_te), y_te)


def meta_gradient(
    network: Network,
    params: dict[str, np.ndarray],
    tasks: list[Task],
    dist: TaskDistribution,
    config: MetaConfig,
    rng: np.random.Generator | int | None = None,
    trainable: Iterable[str] | None = None,
    **task_kwargs,
) -> tuple[float, dict[str, np.ndarray]]:
    """Summed post-adaptation test loss over ``tasks`` and its gradient."""
    check_params(network, params)
    tape = Tape(rng=rng) if isinstance(rng, np.random.Generator) else Tape(seed=rng)
    keys = list(params) if trainable is None else [k for k in params if k in set(trainable)]
    nodes = {k: (tape.variable(v) if k in keys else tape.constant(v)) for k, v in params.items()}
    total = None
    for task in tasks:
        loss = task_test_loss(tape, network, nodes, task, dist, config, **task_kwargs)
        total = loss if total is None else tape.add(total, loss)
    grads = grad(tape, total, [nodes[k] for k in keys])
    return float(total.value[0, 0]), {k: g.value for k, g in zip(keys, grads)}


def meta_step(
    network: Network,
    params: dict[str, np.ndarray],
    adam: AdamState,
    config: MetaConfig,
    task_batch: list[Task],
    dist: TaskDistribution,
    rng: np.random.Generator | int | None = None,
    trainable: Iterable[str] | None = None,
    task_kwargs: dict | None = None,
) -> tuple[dict[str, np.ndarray], float]:
    """One Adam step on the summed meta-loss of ``task_batch``."""
    if len(task_batch) != config.meta_batch:
        raise ValueError(f"expected {config.meta_batch} tasks, got {len(task_batch)}")
    try:
        loss, grads = meta_gradient(network, params, task_batch, dist, config, rng, trainable, **(task_kwargs or {}))
    except NonFiniteError as exc:
        raise DivergenceError(f"meta-loss diverged: {exc}; config={config.as_dict()}", op=exc.op) from exc
    return adam.update(params, grads, config.beta), loss


# -- training ----------------------------------------------------------------


def train(
    network: Network,
    params: dict[str, np.ndarray],
    dist: TaskDistribution,
    config: MetaConfig,
    log_every: int = 100,
    on_log: Callable[[dict], None] | None = None,
    trainable: Iterable[str] | None = None,
    task_kwargs: dict | None = None,
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Meta-train for ``config.iterations`` steps.

    Every ``log_every`` iterations a record with the mean meta-loss over the
    interval and the expected mask fraction per cell is appended (and passed
    to ``on_log``).  Task batches and Gumbel draws for iteration ``t`` come
    from a stream seeded by ``(seed, t)``.  ``trainable`` restricts the
    updated keys; ``task_kwargs`` go to :func:`task_test_loss`.
    """
    from .analysis import expected_mask_fraction

    adam = AdamState.zeros({k: v for k, v in params.items() if trainable is None or k in set(trainable)})
    history: list[dict] = []
    window: list[float] = []
    start = time.perf_counter()
    for it in range(config.iterations):
        rng = np.random.default_rng([config.seed, it])
        tasks = dist.sample_batch(rng, config.meta_batch)
        try:
            params, loss = meta_step(network, params, adam, config, tasks, dist, rng, trainable, task_kwargs)
        except DivergenceError as exc:
            raise DivergenceError(f"iteration {it} (seed {config.seed}): {exc}", op=exc.op) from exc
        window.append(loss)
        if (it + 1) % log_every == 0 or it + 1 == config.iterations:
            row = {
                "iteration": it + 1,
                "meta_loss": float(np.mean(window)),
                "wall_time": time.perf_counter() - start,
                "fractions": expected_mask_fraction(network, params),
            }
            window = []
            history.append(row)
            if on_log is not None:
                on_log(row)
    return params, history


# -- evaluation ----------------------------------------------------------------


def _eval_masks(network, params, config, rng):
    masks = {}
    for i, cell in enumerate(network.cells):
        if not cell.has_mask:
            continue
        zeta = params[f"cell{i}.zeta"]
        if config.mask_eval_mode == "sample":
            masks[i] = sample_mask_hard(zeta, rng, cell.w_shape[1])
        elif config.mask_eval_mode == "threshold":
            masks[i] = threshold_mask(zeta, cell.w_shape[1])
        else:
            tape = Tape(rng=rng)
            masks[i] = relaxed_mask(tape, tape.constant(zeta), config.temperature, cell.w_shape[1]).value
    return masks


def adapted_task_loss(network, params, task, dist, config, alpha=None, steps=None, rng=None):
    """Test MSE after non-differentiable adaptation, plus the adapted params."""
    alpha = config.alpha if alpha is None else alpha
    steps = config.inner_steps_eval if steps is None else steps
    masks = _eval_masks(network, params, config, rng if rng is not None else np.random.default_rng(0))
    x_tr = dist.features(task.x_train)
    adapted = _inner_update(network, params, (x_tr, task.y_train), alpha, steps, masks)
    tape = Tape()
    nodes = {k: tape.constant(v) for k, v in adapted.items()}
    pred = forward(tape, network, nodes, tape.constant(dist.features(task.x_test)))
    return float(np.mean((pred.value.ravel() - task.y_test) ** 2)), adapted


def evaluate(
    network: Network,
    params: dict[str, np.ndarray],
    dist: TaskDistribution,
    config: MetaConfig,
    n_tasks: int = 600,
    alpha: float | None = None,
    steps: int | None = None,
    seed: int | None = None,
) -> tuple[float, float]:
    """Mean post-adaptation test loss over ``n_tasks`` fresh tasks and its 95% CI half-width.

    Task ``j`` and its evaluation mask come from a stream seeded by
    ``(seed, 1, j)``, disjoint from the training streams.
    """
    if n_tasks < 2:
        raise ValueError("n_tasks must be >= 2")
    seed = config.seed if seed is None else seed
    losses = np.empty(n_tasks)
    for j in range(n_tasks):
        rng = np.random.default_rng([seed, _EVAL_STREAM, j])
        task = dist.sample(rng)
        losses[j], _ = adapted_task_loss(network, params, task, dist, config, alpha, steps, rng)
    return float(losses.mean()), float(1.96 * losses.std(ddof=1) / np.sqrt(n_tasks))
