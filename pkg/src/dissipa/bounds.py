"""Second-derivative bound constants for the Taylor-remainder error terms.

Per simplex (bounding box of the simplex):

* ``beta``  -- max |d2 f_k / dxq dxr| over all elements of ``f``
* ``rho[a]`` -- the same for output element ``h_a``
* ``mu[k]`` -- over the ``n`` elements of input column ``k`` of ``G``
* ``theta`` -- over all elements of ``J``

The origin-ball data holds the same four constants as scalars over the cube
of half-width ``epsilon`` together with the Jacobians at the origin.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expr import evaluate, second_derivative_sup
from .mesh import SimplexGeometry, Triangulation, cpa_gradient_matrix
from .model import DynamicsModel

__all__ = ["SimplexDerivativeBounds", "BoundsTable", "OriginBallData", "simplex_bounds",
           "triangulation_bounds", "origin_ball_data", "gradient_norm_bound_vars",
           "GradientNormTemplate", "export_bounds_csv"]


@dataclass(frozen=True)
class SimplexDerivativeBounds:
    beta: float
    rho: np.ndarray
    mu: np.ndarray
    theta: float


@dataclass(frozen=True)
class BoundsTable:
    """Bound constants for every simplex of a triangulation (arrays over simplices)."""

    beta: np.ndarray   # (K,)
    rho: np.ndarray    # (K, p)
    mu: np.ndarray     # (K, m)
    theta: np.ndarray  # (K,)
    certified: bool = True

    def __getitem__(self, i) -> SimplexDerivativeBounds:
        return SimplexDerivativeBounds(float(self.beta[i]), self.rho[i].copy(), self.mu[i].copy(),
                                       float(self.theta[i]))


def _sup_over(model: DynamicsModel, keys, boxes, mode):
    out = np.zeros(boxes.shape[0])
    for key in keys:
        hess = model.hessians[key]
        if all(_is_zero(e) for e in hess.values()):
            continue
        out = np.maximum(out, second_derivative_sup(None, boxes, n=model.n, mode=mode, hessian=hess))
    return out


def _is_zero(e):
    from .expr import Num
    return isinstance(e, Num) and e.value == 0.0


def _bounds_for_boxes(model: DynamicsModel, boxes: np.ndarray, mode: str):
    n, m, p = model.n, model.m, model.p
    beta = _sup_over(model, [("f", i) for i in range(n)], boxes, mode)
    rho = np.stack([_sup_over(model, [("h", a)], boxes, mode) for a in range(p)], axis=1) \
        if p else np.zeros((len(boxes), 0))
    mu = np.stack([_sup_over(model, [("G", i, k) for i in range(n)], boxes, mode) for k in range(m)], axis=1) \
        if m else np.zeros((len(boxes), 0))
    theta = _sup_over(model, [("J", a, k) for a in range(p) for k in range(m)], boxes, mode)
    return beta, rho, mu, theta


def simplex_bounds(model: DynamicsModel, g: SimplexGeometry, mode: str = "interval") -> SimplexDerivativeBounds:
    """Bound constants on the bounding box of one simplex."""
    beta, rho, mu, theta = _bounds_for_boxes(model, g.bounding_box[None], mode)
    return SimplexDerivativeBounds(float(beta[0]), rho[0], mu[0], float(theta[0]))


def triangulation_bounds(model: DynamicsModel, tri: Triangulation, mode: str = "interval") -> BoundsTable:
    """Bound constants for every simplex, computed once per distinct bounding box.

    Kuhn simplices of the same grid cell share a bounding box, so the
    interval work is done per cell.
    """
    boxes, inv = np.unique(np.round(tri.bbox, 12), axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    beta, rho, mu, theta = _bounds_for_boxes(model, boxes, mode)
    return BoundsTable(beta[inv], rho[inv], mu[inv], theta[inv], certified=(mode == "interval"))


def export_bounds_csv(table: BoundsTable, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p, m = table.rho.shape[1], table.mu.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["simplex", "beta"] + [f"rho{a + 1}" for a in range(p)]
                   + [f"mu{k + 1}" for k in range(m)] + ["theta"])
        for i in range(len(table.beta)):
            w.writerow([i, repr(float(table.beta[i]))] + [repr(float(v)) for v in table.rho[i]]
                       + [repr(float(v)) for v in table.mu[i]] + [repr(float(table.theta[i]))])
    return path


@dataclass(frozen=True)
class OriginBallData:
    """Constants on the cube of half-width ``epsilon`` and Jacobians at the origin.

    Attributes
    ----------
    J_f : (n, n)
    J_h : (p, n)
    J_g : (m, n, n)
        Jacobian of input column ``k`` of ``G``.
    J_j : (m, p, n)
        Jacobian of input column ``k`` of ``J``.
    """

    epsilon: float
    beta_eps: float
    rho_eps: float
    mu_eps: float
    theta_eps: float
    J_f: np.ndarray
    J_h: np.ndarray
    J_g: np.ndarray
    J_j: np.ndarray

    @property
    def sum_norm_Jg(self) -> float:
        """``sqrt(sum_k |J_{g_k}|_2^2)``."""
        return float(np.sqrt(sum(np.linalg.norm(a, 2) ** 2 for a in self.J_g))) if len(self.J_g) else 0.0

    @property
    def sum_norm_Jj(self) -> float:
        return float(np.sqrt(sum(np.linalg.norm(a, 2) ** 2 for a in self.J_j))) if len(self.J_j) else 0.0


def origin_ball_data(model: DynamicsModel, epsilon: float, mode: str = "interval") -> OriginBallData:
    """Constants over the bounding cube of the closed ``epsilon``-ball."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    n, m, p = model.n, model.m, model.p
    box = np.tile([[-epsilon, epsilon]], (n, 1))[None]
    beta, rho, mu, theta = _bounds_for_boxes(model, box, mode)
    z = np.zeros(n)
    J_f = model.jacobian_at(model.f, z)
    J_h = model.jacobian_at(model.h, z) if p else np.zeros((0, n))
    J_g = np.stack([model.jacobian_at([model.G[i][k] for i in range(n)], z) for k in range(m)]) \
        if m else np.zeros((0, n, n))
    J_j = np.stack([model.jacobian_at([model.J[a][k] for a in range(p)], z).reshape(p, n)
                    for k in range(m)]) if m else np.zeros((0, p, n))
    return OriginBallData(float(epsilon), float(beta[0]), float(rho.max(initial=0.0)),
                          float(mu.max(initial=0.0)), float(theta[0]), J_f, J_h, J_g, J_j)


@dataclass(frozen=True)
class GradientNormTemplate:
    """Linear rows ``A @ [values; l] <= 0`` encoding ``|grad V|_1 <= l``.

    ``A`` has one row per sign pattern and ``n + 2`` columns: the ``n + 1``
    vertex values in local order followed by ``l``.  With ``aux`` set the
    encoding uses auxiliary variables ``t`` (columns appended after ``l``)
    with ``+-(grad V)_q <= t_q`` and ``sum t <= l``.
    """

    A: np.ndarray
    aux: int = 0

    def feasible(self, values, l, tol: float = 1e-12) -> bool:
        v = np.concatenate([np.asarray(values, float), [l]])
        if self.aux:
            T = self.A[:, : len(v)]
            grad = np.abs(T[:self.aux] @ v)
            return bool(np.sum(grad) <= l + tol)
        return bool(np.all(self.A @ v <= tol))


def sign_patterns(n: int) -> np.ndarray:
    return np.array(list(itertools.product((1.0, -1.0), repeat=n)))


def gradient_norm_bound_vars(g: SimplexGeometry, max_enum_dim: int = 8) -> GradientNormTemplate:
    """Constraint template for ``|grad V_i|_1 <= l_i`` on one simplex."""
    T = cpa_gradient_matrix(g.X_inv)  # (n, n+1)
    n = T.shape[0]
    if n <= max_enum_dim:
        S = sign_patterns(n)
        A = np.concatenate([S @ T, -np.ones((len(S), 1))], axis=1)
        return GradientNormTemplate(A)
    # auxiliary encoding: rows [T, 0, -I] and [-T, 0, -I] then [0, -1, 1...]
    top = np.concatenate([T, np.zeros((n, 1)), -np.eye(n)], axis=1)
    bot = np.concatenate([-T, np.zeros((n, 1)), -np.eye(n)], axis=1)
    last = np.concatenate([np.zeros(n + 1), [-1.0], np.ones(n)])[None]
    return GradientNormTemplate(np.concatenate([top, bot, last]), aux=n)
