"""Single-cell analysis of T-net and MT-net updates.

A cell is ``y = T W x = A x``.  One inner step on ``W`` moves the output by

    y_new - y = -alpha * T (M * T^T) dL/dA x

so ``T T^T`` acts as a preconditioner (its inverse is the metric the task
learner descends in), and a row mask restricts the move to the span of the
unmasked columns of ``T``.  The functions here check those identities
numerically, build cells that realise a given subspace and metric, and
estimate the subspace an arbitrary cell actually updates in.

Residual conventions: every ``check_*`` returns a non-negative float that
should be at round-off level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import subspace_angles

from .meta import inner_update_mtnet, inner_update_tnet
from .net import ZETA_SATURATION, Network, mask_probability, threshold_mask

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
SPAN_TOL = 1e-8


@dataclass(frozen=True)
class SubspaceBasis:
    """Columns spanning a d-dimensional subspace of R^n (d may be 0)."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"basis must be an n x d matrix, got shape {v.shape}")
        if v.shape[1] > v.shape[0]:
            raise ValueError(f"{v.shape[1]} vectors cannot be independent in R^{v.shape[0]}")
        if v.shape[1] and numerical_rank(v, RANK_TOL) != v.shape[1]:
            raise ValueError("basis vectors are linearly dependent")
        object.__setattr__(self, "vectors", v)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class MetricTensor:
    """Symmetric positive-definite Gram matrix of a metric in basis coordinates."""

    G: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.G, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError(f"metric must be square, got shape {g.shape}")
        if np.max(np.abs(g - g.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(g), initial=0.0)):
            raise ValueError("metric is not symmetric")
        if g.size and np.linalg.eigvalsh(g).min() <= 0:
            raise ValueError("metric is not positive definite")
        object.__setattr__(self, "G", g)


def numerical_rank(a: np.ndarray, rel_tol: float) -> int:
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    return int(np.sum(s > rel_tol * s[0])) if s[0] > 0 else 0


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles (radians) between the column spaces of ``a`` and ``b``."""
    return subspace_angles(a, b)


def _column(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def _single_cell(n_in: int, n_out: int, kind: str) -> Network:
    return Network.build([n_in, n_out], kind, bias=False)


def _mse_grad_y(y: np.ndarray, target: np.ndarray) -> np.ndarray:
    # d/dy of mean((y - target)^2)
    return 2.0 * (y - target) / y.size


# -- closed-form identities ------------------------------------------------------


def effective_metric(T) -> np.ndarray:
    """``T T^T``, the matrix premultiplying ``dL/dA x`` in a T-net step.

    Its inverse is the metric of the cell's activation space.
    """
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"T must be square, got shape {T.shape}")
    if not np.isfinite(np.linalg.cond(T)) or np.linalg.cond(T) >= 1e12:
        raise ValueError("T is singular or too ill-conditioned")
    return T @ T.T


def check_delta_y_norm(T, delta_w, x) -> float:
    """``| ||T dW x||^2 - (dW x)^T (T^T T) (dW x) |``."""
    T, delta_w, x = (np.asarray(a, dtype=np.float64) for a in (T, delta_w, x))
    u = delta_w @ x.reshape(-1)
    lhs = float(np.sum((T @ u) ** 2))
    rhs = float(u @ (T.T @ T) @ u)
    return abs(lhs - rhs)


def check_tnet_update(T, W, x, target, alpha: float = 0.1) -> float:
    """Max |y_new - (y - alpha T T^T dL/dA x)| for one T-net step under MSE.

    ``y_new`` comes from the autodiff inner update, the other side is formed
    directly from the analytic ``dL/dA = dL/dy x^T``.
    """
    T, W = np.asarray(T, dtype=np.float64), np.asarray(W, dtype=np.float64)
    x, target = _column(x), _column(target)
    net = _single_cell(W.shape[1], W.shape[0], "tnet")
    adapted = inner_update_tnet(net, {"cell0.W": W, "cell0.T": T}, (x, target), alpha, 1)
    y_new = T @ adapted["cell0.W"] @ x
    y = T @ W @ x
    grad_a = _mse_grad_y(y, target) @ x.T
    closed = y - alpha * effective_metric(T) @ grad_a @ x
    return float(np.max(np.abs(y_new - closed)))


def row_replicated_mask(mask_rows, n: int) -> np.ndarray:
    """n x n matrix whose row j is all ``mask_rows[j]``."""
    m = np.asarray(mask_rows, dtype=np.float64).reshape(-1, 1)
    return np.repeat(m, n, axis=1)


def check_mtnet_unroll(T, W, mask, x, target, alpha: float = 0.1) -> float:
    """Max |y_new - closed form| for one MT-net step with a hard row mask.

    The closed form is ``y - alpha (T * M_T^T)(M_T * T^T) dL/dA x`` where
    ``M_T`` is the n x n row-replicated mask, so ``M_T * T^T`` is ``T^T``
    with the rows of masked-out units zeroed.  ``mask`` is either the W-shaped
    mask or its per-row values.
    """
    T, W = np.asarray(T, dtype=np.float64), np.asarray(W, dtype=np.float64)
    n, m = W.shape
    mask = np.asarray(mask, dtype=np.float64)
    rows = mask[:, 0] if mask.ndim == 2 else mask.reshape(-1)
    w_mask = np.repeat(rows.reshape(-1, 1), m, axis=1)
    x, target = _column(x), _column(target)

    net = _single_cell(m, n, "mtnet")
    params = {"cell0.W": W, "cell0.T": T, "cell0.zeta": np.zeros((n, 1))}
    adapted = inner_update_mtnet(net, params, (x, target), alpha, 1, [w_mask])
    y_new = T @ adapted["cell0.W"] @ x

    y = T @ W @ x
    m_t = row_replicated_mask(rows, n)
    t_m = m_t * T.T
    grad_a = _mse_grad_y(y, target) @ x.T
    closed = y - alpha * (T * m_t.T) @ t_m @ grad_a @ x
    return float(np.max(np.abs(y_new - closed)))


# -- constructive propositions ----------------------------------------------------


def complete_basis(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors orthogonal to span(v) that complete it to a basis of R^n.

    Random Gaussian draws are orthogonalised by modified Gram-Schmidt.  Each
    new vector's largest entry is made positive, so an axis-aligned ``v``
    completes with standard basis vectors.
    """
    n, d = v.shape
    q = np.linalg.qr(v)[0][:, :d] if d else np.zeros((n, 0))
    basis = [q[:, i] for i in range(d)]
    extra = []
    while len(extra) < n - d:
        g = rng.standard_normal(n)
        for b in basis:
            g = g - (b @ g) * b
        for b in basis:  # second pass for stability
            g = g - (b @ g) * b
        norm = np.linalg.norm(g)
        if norm < 1e-8:
            continue
        g = g / norm
        if g[np.argmax(np.abs(g))] < 0:
            g = -g
        basis.append(g)
        extra.append(g)
    return np.column_stack(extra) if extra else np.zeros((n, 0))


def _saturated_zeta(n: int, d: int) -> np.ndarray:
    z = np.full((n, 1), -ZETA_SATURATION)
    z[:d] = ZETA_SATURATION
    return z


def construct_prop1(U: SubspaceBasis, A, rng: np.random.Generator | None = None):
    """Cell ``(T, W, zeta)`` with ``T W = A`` whose updates span exactly ``U``.

    T's first d columns are U's basis vectors, the rest complete a basis;
    the first d logits saturate on and the others off.
    """
    if not isinstance(U, SubspaceBasis):
        U = SubspaceBasis(U)
    A = np.asarray(A, dtype=np.float64)
    if A.shape[0] != U.n:
        raise ValueError(f"A has {A.shape[0]} rows but U lives in R^{U.n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    T = np.hstack([U.vectors, complete_basis(U.vectors, rng)])
    W = np.linalg.solve(T, A)
    return T, W, _saturated_zeta(U.n, U.d)


def construct_prop2(U: SubspaceBasis, G: MetricTensor, A, rng: np.random.Generator | None = None):
    """Cell whose update is steepest descent in ``U`` under metric ``G``.

    With ``G = H^T H`` (H the upper Cholesky factor) T's first d columns are
    ``V H^{-1}``; the remaining construction follows :func:`construct_prop1`.
    """
    if not isinstance(U, SubspaceBasis):
        U = SubspaceBasis(U)
    if not isinstance(G, MetricTensor):
        G = MetricTensor(G)
    if G.G.shape != (U.d, U.d):
        raise ValueError(f"metric is {G.G.shape}, subspace has dimension {U.d}")
    try:
        H = np.linalg.cholesky(G.G).T
    except np.linalg.LinAlgError as exc:
        raise ValueError("metric is not positive definite") from exc
    A = np.asarray(A, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    vh = np.linalg.solve(H.T, U.vectors.T).T  # V H^{-1}
    T = np.hstack([vh, complete_basis(U.vectors, rng)])
    W = np.linalg.solve(T, A)
    return T, W, _saturated_zeta(U.n, U.d)


def cell_update(T, W, zeta, x, target, alpha: float = 0.1, mask=None) -> np.ndarray:
    """``y_new - y`` after one masked inner step under MSE to ``target``.

    Without an explicit ``mask`` the rows are switched by thresholding
    sigmoid(zeta); ``zeta=None`` leaves every row on.
    """
    T, W = np.asarray(T, dtype=np.float64), np.asarray(W, dtype=np.float64)
    n, m = W.shape
    x = _column(x)
    if mask is None:
        mask = np.ones((n, m)) if zeta is None else threshold_mask(zeta, m)
    params = {"cell0.W": W, "cell0.T": T, "cell0.zeta": np.zeros((n, 1))}
    net = _single_cell(m, n, "mtnet")
    adapted = inner_update_mtnet(net, params, (x, _column(target)), alpha, 1, [mask])
    return T @ (adapted["cell0.W"] - W) @ x


def estimate_update_span(cell, x, n_probes: int, rng: np.random.Generator, alpha: float = 0.1) -> SubspaceBasis:
    """Basis of the span of ``y_new - y`` over ``n_probes`` random MSE targets.

    ``cell`` is ``(T, W, zeta)``; the returned basis is the left singular
    vectors above ``1e-8 * sigma_max``.
    """
    T, W, zeta = cell
    W = np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    if n_probes < n:
        raise ValueError(f"need at least {n} probes, got {n_probes}")
    x = _column(x)
    if not np.any(x):
        raise ValueError("x = 0 gives a zero update for every loss")
    y = np.asarray(T) @ W @ x
    scale = max(1.0, float(np.max(np.abs(y))))
    moves = np.column_stack([
        cell_update(T, W, zeta, x, y + scale * rng.standard_normal((n, 1)), alpha).ravel()
        for _ in range(n_probes)
    ])
    u, s, _ = np.linalg.svd(moves, full_matrices=False)
    if s[0] == 0:
        return SubspaceBasis(np.zeros((n, 0)))
    return SubspaceBasis(u[:, s > SPAN_TOL * s[0]])


def steepest_direction(G, grad_coords) -> np.ndarray:
    """Unit-g-norm direction maximising ``-<grad, c> / sqrt(c^T G c)``.

    Solved through the eigendecomposition of G: in coordinates
    ``z = L^{1/2} Q^T c`` the metric is Euclidean and the answer is the
    negative rescaled gradient.
    """
    evals, evecs = np.linalg.eigh(np.asarray(G, dtype=np.float64))
    c = -evecs @ ((evecs.T @ grad_coords) / evals)
    return c / np.sqrt(c @ G @ c)


def descent_rate(G, grad_coords, c) -> np.ndarray:
    """Loss decrease per unit g-length along each column of ``c``."""
    c = np.asarray(c, dtype=np.float64)
    c = c.reshape(-1, 1) if c.ndim == 1 else c
    return -(grad_coords @ c) / np.sqrt(np.einsum("ik,ij,jk->k", c, G, c))


# -- mask statistics ---------------------------------------------------------------


def expected_mask_fraction(network: Network, params: dict[str, np.ndarray]) -> list[float]:
    """Per-cell expected fraction of weights the task learner updates.

    This is the mean of P(mask = 1) = sigmoid(zeta) over the cell's logits.
    Note: the formula e^-zeta / (e^-zeta + 1) sometimes quoted for this
    quantity is P(mask = 0), the complement; see :func:`complement_fraction`.
    Cells without a mask update everything and report 1.0.
    """
    out = []
    for i, cell in enumerate(network.cells):
        if cell.has_mask:
            out.append(float(np.mean(mask_probability(params[f"cell{i}.zeta"]))))
        else:
            out.append(1.0)
    return out


def network_mask_fraction(network: Network, params: dict[str, np.ndarray]) -> float:
    """Mean of sigmoid(zeta) over every logit in the network."""
    zs = [params[f"cell{i}.zeta"].ravel() for i, c in enumerate(network.cells) if c.has_mask]
    if not zs:
        return 1.0
    return float(np.mean(mask_probability(np.concatenate(zs))))


def complement_fraction(network: Network, params: dict[str, np.ndarray]) -> list[float]:
    """Per-cell mean of e^-zeta / (e^-zeta + 1), i.e. 1 - expected_mask_fraction."""
    return [
        float(np.mean(mask_probability(-params[f"cell{i}.zeta"]))) if c.has_mask else 0.0
        for i, c in enumerate(network.cells)
    ]
