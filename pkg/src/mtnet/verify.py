"""Randomised property suite behind the ``verify`` subcommand.

Each property is a function ``(rng, n) -> residual`` run over many seeded
instances.  Instance ``i`` of property ``p`` under master seed ``s`` and size
``n`` uses ``default_rng([s, index(p), n, i])``, so any reported instance can
be replayed exactly with :func:`replay`.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import analysis as an
from .autodiff import Tape, finite_difference, grad
from .meta import MetaConfig, meta_gradient, task_test_loss, train
from .net import init_network
from .tasks import TaskDistribution

FD_STEP = 1e-5


def gradient_error(analytic, numeric) -> float:
    """Max entrywise ``|a - n| / max(|a|, |n|, 1e-3)``.

    ``<= 1e-4`` means within 1e-4 relative error, or 1e-7 absolute when both
    sides are tiny.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)))


# -- single-op gradient checks -----------------------------------------------------


def _away_from_zero(rng, rows, cols, low=0.1):
    x = rng.uniform(low, 2.0, size=(rows, cols))
    return x * rng.choice([-1.0, 1.0], size=(rows, cols))


def _op_cases():
    """op name -> (input sampler(rng, r, c), builder(tape, node) -> node)."""
    def other(rng, shape):
        return rng.standard_normal(shape)

    return {
        "matmul": (lambda rng, r, c: rng.standard_normal((r, c)),
                   lambda t, x, rng: t.matmul(x, t.constant(other(rng, (x.shape[1], 3))))),
        "matmul_right": (lambda rng, r, c: rng.standard_normal((r, c)),
                         lambda t, x, rng: t.matmul(t.constant(other(rng, (2, x.shape[0]))), x)),
        "add": (lambda rng, r, c: rng.standard_normal((r, c)),
                lambda t, x, rng: t.add(x, t.constant(other(rng, x.shape)))),
        "subtract": (lambda rng, r, c: rng.standard_normal((r, c)),
                     lambda t, x, rng: t.sub(t.constant(other(rng, x.shape)), x)),
        "scale": (lambda rng, r, c: rng.standard_normal((r, c)), lambda t, x, rng: t.scale(x, -1.7)),
        "hadamard": (lambda rng, r, c: rng.standard_normal((r, c)), lambda t, x, rng: t.hadamard(x, x)),
        "transpose": (lambda rng, r, c: rng.standard_normal((r, c)), lambda t, x, rng: t.transpose(x)),
        "relu": (_away_from_zero, lambda t, x, rng: t.relu(x)),
        "sigmoid": (lambda rng, r, c: 3 * rng.standard_normal((r, c)), lambda t, x, rng: t.sigmoid(x)),
        "exp": (lambda rng, r, c: rng.standard_normal((r, c)), lambda t, x, rng: t.exp(x)),
        "log": (lambda rng, r, c: rng.uniform(0.2, 3.0, (r, c)), lambda t, x, rng: t.log(x)),
        "reciprocal": (_away_from_zero, lambda t, x, rng: t.reciprocal(x)),
        "mse_loss": (lambda rng, r, c: rng.standard_normal((r, c)),
                     lambda t, x, rng: t.mse_loss(x, t.constant(other(rng, x.shape)))),
        "gumbel_bernoulli": (lambda rng, r, c: rng.standard_normal((r, c)),
                             lambda t, x, rng: t.gumbel_bernoulli(x, 0.7)),
        "broadcast_row": (lambda rng, r, c: rng.standard_normal((r, 1)), lambda t, x, rng: t.broadcast_row(x, 4)),
        "sum_cols": (lambda rng, r, c: rng.standard_normal((r, c)), lambda t, x, rng: t.sum_cols(x)),
        "sum_all": (lambda rng, r, c: rng.standard_normal((r, c)), lambda t, x, rng: t.sum_all(x)),
        "expand": (lambda rng, r, c: rng.standard_normal((1, 1)), lambda t, x, rng: t.expand(x, (3, 2))),
        "append_row": (lambda rng, r, c: rng.standard_normal((r, c)), lambda t, x, rng: t.append_row(x, 1.0)),
        "take_rows": (lambda rng, r, c: rng.standard_normal((r + 1, c)),
                      lambda t, x, rng: t.take_rows(x, x.shape[0] - 1)),
    }


OP_CASES = _op_cases()


def op_gradient_error(op: str, rng: np.random.Generator, rows: int, cols: int) -> float:
    """FD vs analytic gradient of ``sum(weights * op(x))`` for one op instance."""
    sampler, build = OP_CASES[op]
    x0 = sampler(rng, rows, cols)
    seed = int(rng.integers(2**32))

    def evaluate(x, want_grad=False):
        # a fresh stream per call keeps constants and Gumbel draws fixed
        r = np.random.default_rng(seed)
        tape = Tape(rng=np.random.default_rng(seed + 1))
        node = tape.variable(x)
        out = build(tape, node, r)
        weights = tape.constant(r.standard_normal(out.shape))
        f = tape.sum_all(tape.hadamard(out, weights))
        if want_grad:
            return grad(tape, f, [node])[0].value
        return float(f.value[0, 0])

    return gradient_error(evaluate(x0, True), finite_difference(evaluate, x0, FD_STEP))


def second_order_residual(rng: np.random.Generator, n: int) -> float:
    """Meta-gradient through one inner step of a quadratic, against its closed form.

    With ``L(t) = 0.5 t^T H t - b^T t`` and ``f(t) = L(t - alpha grad L(t))``
    the gradient is ``(I - alpha H) grad L(t_new)``.
    """
    a = rng.standard_normal((n, n))
    H = a @ a.T / n + np.eye(n)
    b = rng.standard_normal((n, 1))
    theta0 = rng.standard_normal((n, 1))
    alpha = 0.1

    tape = Tape()
    theta = tape.variable(theta0)
    hm, bm = tape.constant(H), tape.constant(b)

    def loss(t):
        quad = tape.sum_all(tape.hadamard(t, tape.matmul(hm, t)))
        return tape.sub(tape.scale(quad, 0.5), tape.sum_all(tape.hadamard(bm, t)))

    (g,) = grad(tape, loss(theta), [theta], create_graph=True)
    adapted = tape.sub(theta, tape.scale(g, alpha))
    (meta,) = grad(tape, loss(adapted), [theta])

    t_new = theta0 - alpha * (H @ theta0 - b)
    closed = (np.eye(n) - alpha * H) @ (H @ t_new - b)
    return float(np.max(np.abs(meta.value - closed)))


def relu_margin(network, params, tasks, dist, config, seed) -> float:
    """Smallest |input| to any relu on the meta-loss tape (inf without relus)."""
    tape = Tape(seed=seed)
    nodes = {k: tape.constant(v) for k, v in params.items()}
    for task in tasks:
        task_test_loss(tape, network, nodes, task, dist, config)
    relu_inputs = [np.min(np.abs(n.parents[0].value)) for n in tape.nodes if n.op == "relu"]
    return float(min(relu_inputs, default=np.inf))


def meta_gradient_error(kind: str, rng: np.random.Generator, sizes=(1, 4, 4, 1), alpha: float = 0.05,
                        kink_margin: float = 1e-3) -> float:
    """FD vs analytic meta-gradient over every parameter of a small network.

    Parameters are perturbed away from the init so T and zeta are generic;
    Gumbel draws are fixed by reseeding the tape on every evaluation.  Draws
    with a relu input within ``kink_margin`` of zero are redrawn, since a
    central difference straddling a kink measures the kink, not the gradient.
    """
    dist = TaskDistribution()
    cfg = MetaConfig(meta_batch=2, alpha=alpha)
    while True:
        net, params = init_network(list(sizes), kind, rng)
        params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in params.items()}
        tasks = dist.sample_batch(rng, 2)
        seed = int(rng.integers(2**32))
        if relu_margin(net, params, tasks, dist, cfg, seed) > kink_margin:
            break
    _, grads = meta_gradient(net, params, tasks, dist, cfg, rng=seed)
    worst = 0.0
    for key in params:
        def f(v, key=key):
            q = dict(params)
            q[key] = v
            return meta_gradient(net, q, tasks, dist, cfg, rng=seed)[0]

        worst = max(worst, gradient_error(grads[key], finite_difference(f, params[key], FD_STEP)))
    return worst


# -- analysis properties -------------------------------------------------------------


def _generic_cell(rng, n):
    m = int(rng.integers(1, 17))
    T = rng.standard_normal((n, n)) + 2 * np.eye(n)
    W = rng.standard_normal((n, m))
    return T, W, rng.standard_normal((m, 1)), rng.standard_normal((n, 1))


def prop_delta_y_norm(rng, n, perturb: float = 0.0):
    T, W, x, _ = _generic_cell(rng, n)
    dW = rng.standard_normal(W.shape)
    return an.check_delta_y_norm(T, dW, x) + perturb


def prop_tnet_update(rng, n, perturb: float = 0.0):
    T, W, x, target = _generic_cell(rng, n)
    return an.check_tnet_update(T, W, x, target, alpha=0.05) + perturb


def prop_mtnet_unroll(rng, n, perturb: float = 0.0):
    T, W, x, target = _generic_cell(rng, n)
    mask = (rng.random(n) < 0.5).astype(float)
    return an.check_mtnet_unroll(T, W, mask, x, target, alpha=0.05) + perturb


def _random_subspace(rng, n, d):
    return an.SubspaceBasis(rng.standard_normal((n, d)))


def prop1_reconstruction(rng, n, perturb: float = 0.0):
    d = int(rng.integers(0, n + 1))
    A = rng.standard_normal((n, int(rng.integers(1, 17))))
    T, W, _ = an.construct_prop1(_random_subspace(rng, n, d), A, rng)
    return float(np.max(np.abs(T @ W - A))) + perturb


def prop1_span(rng, n, perturb: float = 0.0):
    """Max principal angle between U and the measured update span; inf on a rank mismatch."""
    d = int(rng.integers(1, n + 1))
    U = _random_subspace(rng, n, d)
    m = int(rng.integers(1, 17))
    cell = an.construct_prop1(U, rng.standard_normal((n, m)), rng)
    x = rng.standard_normal((m, 1))
    span = an.estimate_update_span(cell, x, n_probes=n + 4, rng=rng)
    if span.d != d:
        return float("inf")
    return float(np.max(an.principal_angles(U.vectors, span.vectors))) + perturb


def _prop2_instance(rng, n):
    d = int(rng.integers(1, n + 1))
    U = _random_subspace(rng, n, d)
    a = rng.standard_normal((d, d))
    G = a @ a.T + 0.5 * np.eye(d)
    m = int(rng.integers(1, 17))
    A = rng.standard_normal((n, m))
    x = rng.standard_normal((m, 1))
    target = A @ x + rng.standard_normal((n, 1))
    return U, G, A, x, target


def realized_direction(U, G, A, x, target, rng, alpha=0.05):
    """Coordinates (in U's basis) of the update of a Prop-2 cell, and the gradient there."""
    T, W, zeta = an.construct_prop2(U, G, A, rng)
    dy = an.cell_update(T, W, zeta, x, target, alpha)
    coords, *_ = np.linalg.lstsq(U.vectors, dy, rcond=None)
    y = A @ x
    grad_coords = (U.vectors.T @ (2.0 * (y - target) / y.size)).ravel()
    return coords.ravel(), grad_coords, float(np.linalg.norm(U.vectors @ coords - dy))


def prop2_probe_excess(rng, n, perturb: float = 0.0, n_probes: int = 10_000):
    """Relative amount by which the best random unit-g probe beats the realized direction."""
    U, G, A, x, target = _prop2_instance(rng, n)
    coords, grad_c, _ = realized_direction(U, G, A, x, target, rng)
    best_realized = float(an.descent_rate(G, grad_c, coords)[0])
    probes = rng.standard_normal((U.d, n_probes))
    best_probe = float(np.max(an.descent_rate(G, grad_c, probes)))
    return max(0.0, (best_probe - best_realized) / abs(best_realized)) + perturb


def prop2_oracle_direction(rng, n, perturb: float = 0.0):
    """Distance between the unit-g realized direction and the eigendecomposition oracle."""
    U, G, A, x, target = _prop2_instance(rng, n)
    coords, grad_c, off_subspace = realized_direction(U, G, A, x, target, rng)
    unit = coords / np.sqrt(coords @ G @ coords)
    oracle = an.steepest_direction(G, grad_c)
    return float(np.max(np.abs(unit - oracle))) + off_subspace + perturb


def prop2_metric_scale(rng, n, perturb: float = 0.0):
    """``1 - cos`` between update directions under G and under k*G."""
    U, G, A, x, target = _prop2_instance(rng, n)
    k = float(rng.uniform(0.1, 10.0))
    c1, _, _ = realized_direction(U, G, A, x, target, np.random.default_rng(0))
    c2, _, _ = realized_direction(U, k * G, A, x, target, np.random.default_rng(0))
    cos = float(c1 @ c2 / (np.linalg.norm(c1) * np.linalg.norm(c2)))
    return max(0.0, 1.0 - cos) + perturb


# -- reduction chain ------------------------------------------------------------------


def reduction_chain(iterations: int = 20, sizes=(1, 8, 8, 1), seed: int = 0) -> dict[str, list[float]]:
    """Per-iteration meta-losses for the four runs of the reduction chain.

    ``mtnet_ones``: MT-net trained with every mask fixed to one (zeta frozen);
    ``tnet``: T-net; ``tnet_identity``: T-net with T frozen at I; ``maml``.
    All four share the seed, so W starts identical and the task streams agree.
    """
    dist = TaskDistribution()
    cfg = MetaConfig(iterations=iterations, seed=seed)

    def losses(kind, trainable=None, task_kwargs=None):
        net, params = init_network(list(sizes), kind, np.random.default_rng(seed))
        keys = [k for k in params if trainable is None or k.endswith(trainable)]
        _, hist = train(net, params, dist, cfg, log_every=1, trainable=keys, task_kwargs=task_kwargs)
        return [h["meta_loss"] for h in hist]

    ones = {i: np.ones(c.w_shape) for i, c in enumerate(init_network(list(sizes), "mtnet",
                                                                     np.random.default_rng(0))[0].cells)}
    return {
        "mtnet_ones": losses("mtnet", (".W", ".T"), {"fixed_masks": ones}),
        "tnet": losses("tnet"),
        "tnet_identity": losses("tnet", (".W",)),
        "maml": losses("maml"),
    }


# -- suite ------------------------------------------------------------------------------


@dataclass
class Property:
    name: str
    fn: Callable
    tolerance: float
    per_size: int = 25


def _op_property(op):
    def fn(rng, n, perturb=0.0):
        return op_gradient_error(op, rng, int(rng.integers(1, n + 1)), int(rng.integers(1, 6))) + perturb
    return fn


def _kind_property(kind):
    def fn(rng, n, perturb=0.0):
        return meta_gradient_error(kind, rng) + perturb
    return fn


def default_properties() -> list[Property]:
    props = [
        Property("delta_y_norm", prop_delta_y_norm, 1e-10),
        Property("tnet_update_closed_form", prop_tnet_update, 1e-10),
        Property("mtnet_unroll_closed_form", prop_mtnet_unroll, 1e-10),
        Property("prop1_reconstruction", prop1_reconstruction, 1e-8),
        Property("prop1_span_angles", prop1_span, 1e-6),
        Property("prop2_probe_optimality", prop2_probe_excess, 1e-6, per_size=10),
        Property("prop2_oracle_direction", prop2_oracle_direction, 1e-6),
        Property("prop2_metric_scale_invariance", prop2_metric_scale, 1e-10),
        Property("second_order_quadratic", lambda rng, n, perturb=0.0: second_order_residual(rng, n) + perturb, 1e-8),
    ]
    props += [Property(f"grad_{op}", _op_property(op), 1e-4, per_size=5) for op in OP_CASES]
    props += [Property(f"meta_grad_{k}", _kind_property(k), 1e-4, per_size=1) for k in ("maml", "tnet", "mtnet")]
    return props


@dataclass
class Record:
    name: str
    instances: int
    max_residual: float
    tolerance: float
    passed: bool
    worst_seed: int
    worst_size: int
    worst_instance: int
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def instance_rng(seed: int, prop_index: int, size: int, instance: int) -> np.random.Generator:
    return np.random.default_rng([seed, prop_index, size, instance])


def run_suite(
    sizes=(2, 4, 8, 16),
    seeds=(0,),
    force_failure: bool = False,
    only: list[str] | None = None,
    instance_scale: float = 1.0,
) -> list[Record]:
    """Run every property; ``force_failure`` perturbs the delta-y identity by 1e-3."""
    records = []
    for index, prop in enumerate(default_properties()):
        if only and prop.name not in only:
            continue
        perturb = 1e-3 if force_failure and prop.name == "delta_y_norm" else 0.0
        per_size = max(1, int(round(prop.per_size * instance_scale)))
        start = time.perf_counter()
        worst, worst_at, count = -1.0, (0, 0, 0), 0
        for seed in seeds:
            for size in sizes:
                for i in range(per_size):
                    r = prop.fn(instance_rng(seed, index, size, i), size, perturb)
                    count += 1
                    if not r <= worst:  # also catches nan/inf
                        worst, worst_at = r, (seed, size, i)
        records.append(Record(
            prop.name, count, float(worst), prop.tolerance, bool(worst <= prop.tolerance),
            *worst_at, round(time.perf_counter() - start, 3),
        ))
    return records


def replay(name: str, seed: int, size: int, instance: int, force_failure: bool = False) -> float:
    """Residual of one reported instance."""
    for index, prop in enumerate(default_properties()):
        if prop.name == name:
            perturb = 1e-3 if force_failure and name == "delta_y_norm" else 0.0
            return prop.fn(instance_rng(seed, index, size, instance), size, perturb)
    raise KeyError(f"unknown property {name!r}")
