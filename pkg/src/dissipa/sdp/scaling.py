"""Problem equilibration.

Blocks and linear rows are rescaled by positive factors (which leaves every
constraint set unchanged) and variables by ``y = d * y_scaled``.  A few
Ruiz-style sweeps balance block norms against column norms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .program import BlockGroup, ConicProgram

__all__ = ["ScaleMap", "scale_program", "condition_measure"]


@dataclass(frozen=True)
class ScaleMap:
    """Unscaling data: ``y = var_scale * y_scaled`` and ``obj = obj_scale * obj_scaled``."""

    var_scale: np.ndarray
    obj_scale: float
    block_scale: tuple  # per group arrays
    row_scale: np.ndarray

    def unscale_x(self, y_scaled):
        return self.var_scale * np.asarray(y_scaled, float)

    def scale_x(self, y):
        return np.asarray(y, float) / self.var_scale


def _inv(a):
    """``1 / a`` where ``a > 0``, else 1."""
    a = np.asarray(a, float)
    out = np.ones_like(a)
    np.divide(1.0, a, out=out, where=a > 0)
    return out


def _inv_sqrt(a):
    return _inv(np.sqrt(np.maximum(a, 0.0)))


def _block_coef_norms(g: BlockGroup):
    return np.sqrt(np.einsum("kvij,kvij->k", g.coef, g.coef))


def _col_norms_sq(groups, G, N):
    out = np.zeros(N)
    for g in groups:
        sq = np.einsum("kvij,kvij->kv", g.coef, g.coef)
        out += np.bincount(g.index.ravel(), weights=sq.ravel(), minlength=N)
    if G.shape[0]:
        out += np.asarray(G.multiply(G).sum(axis=0)).ravel()
    return out


def condition_measure(p: ConicProgram) -> float:
    """Spread of block/row norms and column norms (max over min, nonzero only)."""
    norms = [n for g in p.groups for n in _block_coef_norms(g)]
    G, _ = p.inequalities(include_bounds=False)
    if G.shape[0]:
        norms.extend(np.sqrt(np.asarray(G.multiply(G).sum(axis=1)).ravel()))
    norms = np.array([v for v in norms if v > 0])
    cols = np.sqrt(_col_norms_sq(p.groups, G, p.n_vars))
    cols = cols[cols > 0]
    r1 = norms.max() / norms.min() if norms.size else 1.0
    r2 = cols.max() / cols.min() if cols.size else 1.0
    return float(max(r1, r2))


def scale_program(p: ConicProgram, sweeps: int = 6):
    """Return ``(scaled_program, ScaleMap)``.

    Solving the scaled program and mapping the result back with
    :meth:`ScaleMap.unscale_x` solves the original problem.
    """
    N = p.n_vars
    d = np.ones(N)
    groups = [BlockGroup(g.constant.copy(), g.index.copy(), g.coef.copy(), g.name) for g in p.groups]
    bscale = [np.ones(g.count) for g in groups]
    G, h = p.inequalities(include_bounds=False)
    G = G.tocsr().astype(float)
    h = h.copy()
    E, f = p.equalities()
    E = E.tocsr().astype(float)
    f = f.copy()
    rscale = np.ones(G.shape[0])
    for _ in range(sweeps):
        # rows / blocks
        for gi, g in enumerate(groups):
            nb = _block_coef_norms(g)
            fac = _inv_sqrt(nb)
            g.constant *= fac[:, None, None]
            g.coef *= fac[:, None, None, None]
            bscale[gi] *= fac
        if G.shape[0]:
            rn = np.sqrt(np.asarray(G.multiply(G).sum(axis=1)).ravel())
            fac = _inv_sqrt(rn)
            G = sp.diags(fac) @ G
            h *= fac
            rscale *= fac
        # columns
        cn = np.sqrt(_col_norms_sq(groups, G, N))
        fac = _inv_sqrt(cn)
        for g in groups:
            g.coef *= fac[g.index][:, :, None, None]
        if G.shape[0]:
            G = G @ sp.diags(fac)
        if E.shape[0]:
            E = E @ sp.diags(fac)
        d *= fac
    # normalise block constants jointly with their coefficients
    cs = d * p.c
    obj_scale = float(np.max(np.abs(cs))) if np.any(cs) else 1.0
    q = ConicProgram()
    q.n_vars, q.names = N, list(p.names)
    q.c = cs / obj_scale
    q.lb = np.where(np.isfinite(p.lb), p.lb / d, p.lb)
    q.ub = np.where(np.isfinite(p.ub), p.ub / d, p.ub)
    q.groups = groups
    if G.shape[0]:
        Gc = G.tocoo()
        q._ineq = [(Gc.row, Gc.col, Gc.data, h)]
    if E.shape[0]:
        en = np.sqrt(np.asarray(E.multiply(E).sum(axis=1)).ravel())
        fac = _inv(en)
        Ec = (sp.diags(fac) @ E).tocoo()
        q._eq = [(Ec.row, Ec.col, Ec.data, f * fac)]
    return q, ScaleMap(d, obj_scale, tuple(bscale), rscale)
