"""Conic program model: linear objective, linear constraints and LMI blocks.

Every matrix block is a constraint ``F(y) = F0 + sum_i y_i F_i <= 0`` in the
negative-semidefinite sense.  Linear inequalities read ``G y <= h`` and
equalities ``E y = f``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = ["LMIBlock", "BlockGroup", "ConicProgram", "Solution", "SolverSettings",
           "check_solution", "ResidualReport", "write_sparse_text"]


@dataclass
class LMIBlock:
    """Single affine matrix block ``constant + sum y[var] * coef <= 0``.

    Parameters
    ----------
    constant : ndarray, shape (s, s)
    terms : list of (int, ndarray)
        Variable index and symmetric coefficient matrix pairs.
    """

    constant: np.ndarray
    terms: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.constant = np.atleast_2d(np.asarray(self.constant, dtype=float))

    @property
    def size(self) -> int:
        return self.constant.shape[0]

    def value(self, y) -> np.ndarray:
        out = self.constant.copy()
        for v, coef in self.terms:
            out += y[v] * coef
        return out

    def as_group(self) -> "BlockGroup":
        s = self.size
        if self.terms:
            idx = np.array([[v for v, _ in self.terms]], dtype=np.int64)
            coef = np.stack([np.asarray(c, float) for _, c in self.terms])[None]
        else:
            idx = np.zeros((1, 0), dtype=np.int64)
            coef = np.zeros((1, 0, s, s))
        return BlockGroup(self.constant[None].copy(), idx, coef, self.name)


@dataclass
class BlockGroup:
    """``K`` blocks of equal size ``s`` sharing a slot layout.

    Attributes
    ----------
    constant : ndarray, shape (K, s, s)
    index : ndarray of int, shape (K, v)
        Variable index of every slot (repeats are summed).
    coef : ndarray, shape (K, v, s, s)
    """

    constant: np.ndarray
    index: np.ndarray
    coef: np.ndarray
    name: str = ""

    @property
    def size(self) -> int:
        return self.constant.shape[1]

    @property
    def count(self) -> int:
        return self.constant.shape[0]

    def value(self, y) -> np.ndarray:
        y = np.asarray(y, float)
        if self.index.shape[1] == 0:
            return self.constant.copy()
        return self.constant + np.einsum("kv,kvij->kij", y[self.index], self.coef)

    def block(self, k: int) -> LMIBlock:
        return LMIBlock(self.constant[k].copy(),
                        [(int(v), self.coef[k, a].copy()) for a, v in enumerate(self.index[k])],
                        f"{self.name}[{k}]")


@dataclass
class SolverSettings:
    """Interior-point settings.

    Attributes
    ----------
    feas_tol : float
        Tolerance on block residuals (max eigenvalue of ``F(y)``) and
        relative infeasibilities.
    gap_tol : float
        Relative duality gap.
    max_iter : int
    scale : bool
        Apply :func:`~dissipa.sdp.scaling.scale_program` before solving.
    verbosity : int
        Iteration log to stderr at 2 and above.
    backend : str
        ``"ipm"`` (bundled) or ``"clarabel"``/``"scs"`` through cvxpy when
        installed.
    """

    feas_tol: float = 1e-7
    gap_tol: float = 1e-6
    max_iter: int = 200
    scale: bool = True
    verbosity: int = 0
    backend: str = "ipm"
    step_fraction: float = 0.95
    infeas_tol: float = 1e-8


@dataclass
class Solution:
    """Solver outcome.

    Attributes
    ----------
    status : str
        ``"optimal"``, ``"infeasible"``, ``"unbounded"`` or ``"numerical_trouble"``.
    x : ndarray
        Variable values.
    objective : float
        Primal objective ``c @ x``.
    dual_bound : float
        Lower bound on the optimal value from the dual iterate.
    max_block_residual : float
        Largest eigenvalue of any block ``F(x)``.
    max_linear_residual : float
    iterations : int
    info : dict
    """

    status: str
    x: np.ndarray
    objective: float
    dual_bound: float
    max_block_residual: float
    max_linear_residual: float
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class ConicProgram:
    """Minimise ``c @ y`` subject to LMI blocks and linear constraints.

    Variables are registered with :meth:`add_variables`; blocks and rows
    may only reference registered indices.
    """

    def __init__(self, n_vars: int = 0):
        self.n_vars = 0
        self.names: list = []
        self.c = np.zeros(0)
        self.groups: list = []
        self._ineq = []  # (rows, cols, vals, rhs)
        self._eq = []
        self.lb = np.zeros(0)
        self.ub = np.zeros(0)
        if n_vars:
            self.add_variables(n_vars)

    # -- variables ---------------------------------------------------------------
    def add_variables(self, count: int, name: str = "y", lb=-np.inf, ub=np.inf) -> np.ndarray:
        start = self.n_vars
        self.n_vars += int(count)
        self.names.extend(f"{name}[{k}]" if count > 1 else name for k in range(count))
        self.c = np.concatenate([self.c, np.zeros(count)])
        self.lb = np.concatenate([self.lb, np.full(count, lb, dtype=float)])
        self.ub = np.concatenate([self.ub, np.full(count, ub, dtype=float)])
        return np.arange(start, self.n_vars)

    def set_objective(self, c):
        c = np.asarray(c, dtype=float)
        if c.shape != (self.n_vars,) or not np.all(np.isfinite(c)):
            raise ValueError("objective must be a finite vector of length n_vars")
        self.c = c.copy()

    # -- constraints --------------------------------------------------------------
    def _check_idx(self, idx):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_vars):
            raise ValueError("constraint references an unregistered variable")

    def add_lmi(self, block: LMIBlock):
        self.add_group(block.as_group())

    def add_group(self, group: BlockGroup):
        self._check_idx(group.index)
        K, s = group.constant.shape[:2]
        if group.coef.shape != (K, group.index.shape[1], s, s):
            raise ValueError("inconsistent block group shapes")
        self.groups.append(group)

    def _rows(self, idx, coef, rhs):
        idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
        coef = np.atleast_2d(np.asarray(coef, dtype=float))
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float))
        if idx.shape != coef.shape or idx.shape[0] != rhs.shape[0]:
            raise ValueError("row index/coefficient/rhs shape mismatch")
        self._check_idx(idx)
        rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
        return rows, idx.ravel(), coef.ravel(), rhs

    def add_linear_le(self, idx, coef, rhs):
        """Add rows ``sum_j coef[r, j] * y[idx[r, j]] <= rhs[r]``."""
        self._ineq.append(self._rows(idx, coef, rhs))

    def add_linear_eq(self, idx, coef, rhs):
        self._eq.append(self._rows(idx, coef, rhs))

    @staticmethod
    def _stack(parts, n):
        if not parts:
            return sp.csr_matrix((0, n)), np.zeros(0)
        rows, cols, vals, rhs = [], [], [], []
        off = 0
        for r, c, v, h in parts:
            rows.append(r + off)
            cols.append(c)
            vals.append(v)
            rhs.append(h)
            off += len(h)
        M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(off, n))
        M.sum_duplicates()
        return M, np.concatenate(rhs)

    def inequalities(self, include_bounds: bool = True):
        """``(G, h)`` with bounds appended as rows when requested."""
        G, h = self._stack(self._ineq, self.n_vars)
        if include_bounds:
            extra_G, extra_h = [G], [h]
            fin = np.flatnonzero(np.isfinite(self.ub))
            if fin.size:
                extra_G.append(sp.csr_matrix((np.ones(fin.size), (np.arange(fin.size), fin)),
                                             shape=(fin.size, self.n_vars)))
                extra_h.append(self.ub[fin])
            fin = np.flatnonzero(np.isfinite(self.lb))
            if fin.size:
                extra_G.append(sp.csr_matrix((-np.ones(fin.size), (np.arange(fin.size), fin)),
                                             shape=(fin.size, self.n_vars)))
                extra_h.append(-self.lb[fin])
            G = sp.vstack(extra_G).tocsr()
            h = np.concatenate(extra_h)
        return G, h

    def equalities(self):
        return self._stack(self._eq, self.n_vars)

    @property
    def n_blocks(self) -> int:
        return sum(g.count for g in self.groups)

    def summary(self) -> dict:
        G, _ = self.inequalities()
        E, _ = self.equalities()
        sizes = {}
        for g in self.groups:
            sizes[g.size] = sizes.get(g.size, 0) + g.count
        return {"variables": self.n_vars, "blocks": self.n_blocks,
                "block_sizes": {str(k): v for k, v in sorted(sizes.items())},
                "linear_inequalities": G.shape[0], "linear_equalities": E.shape[0]}

    def permuted(self, rng) -> "ConicProgram":
        """Copy with blocks and rows shuffled (used to test order invariance)."""
        q = ConicProgram()
        q.n_vars, q.names, q.c = self.n_vars, list(self.names), self.c.copy()
        q.lb, q.ub = self.lb.copy(), self.ub.copy()
        order = rng.permutation(len(self.groups))
        for i in order:
            g = self.groups[i]
            perm = rng.permutation(g.count)
            q.groups.append(BlockGroup(g.constant[perm], g.index[perm], g.coef[perm], g.name))
        q._ineq = [self._ineq[i] for i in rng.permutation(len(self._ineq))]
        q._eq = list(self._eq)
        return q


@dataclass
class ResidualReport:
    """Independent recomputation of constraint residuals at a point.

    Positive numbers are violations.
    """

    block_max_eig: list  # per group arrays of max eigenvalues
    max_block: float
    max_ineq: float
    max_eq: float
    ok: bool

    def worst_blocks(self, k: int = 5):
        flat = [(float(v), gi, bi) for gi, arr in enumerate(self.block_max_eig) for bi, v in enumerate(arr)]
        return sorted(flat, reverse=True)[:k]


def check_solution(p: ConicProgram, s, tol: float = 1e-7, lin_tol: float = 1e-8) -> ResidualReport:
    """Recompute every block's max eigenvalue and the linear residuals.

    ``s`` is a :class:`Solution` or a raw vector of variable values.
    """
    y = np.asarray(s.x if isinstance(s, Solution) else s, dtype=float)
    per = []
    worst = -np.inf
    for g in p.groups:
        if g.count == 0:
            per.append(np.zeros(0))
            continue
        ev = np.linalg.eigvalsh(g.value(y))[:, -1]
        per.append(ev)
        worst = max(worst, float(ev.max()))
    G, h = p.inequalities()
    E, f = p.equalities()
    ineq = float(np.max(G @ y - h)) if G.shape[0] else -np.inf
    eq = float(np.max(np.abs(E @ y - f))) if E.shape[0] else 0.0
    ok = (worst <= tol) and (ineq <= lin_tol) and (eq <= lin_tol)
    return ResidualReport(per, worst, ineq, eq, ok)


def write_sparse_text(p: ConicProgram, path):
    """Dump the program as text: variable count, objective, then triplets.

    Lines: ``var <n>``; ``obj <i> <c_i>``; for every block ``block <id> <size>``
    followed by ``<var|-1> <row> <col> <value>`` upper-triangle triplets
    (``-1`` marks the constant); ``le``/``eq`` rows as ``<var> <coef>`` lists.
    """
    with open(path, "w") as fh:
        fh.write(f"var {p.n_vars}\n")
        for i in np.flatnonzero(p.c):
            fh.write(f"obj {i} {p.c[i]!r}\n")
        bid = 0
        for g in p.groups:
            for k in range(g.count):
                s = g.size
                fh.write(f"block {bid} {s}\n")
                iu = np.triu_indices(s)
                for r, c_ in zip(*iu):
                    if g.constant[k, r, c_] != 0.0:
                        fh.write(f"-1 {r} {c_} {g.constant[k, r, c_]!r}\n")
                for a, v in enumerate(g.index[k]):
                    for r, c_ in zip(*iu):
                        if g.coef[k, a, r, c_] != 0.0:
                            fh.write(f"{v} {r} {c_} {g.coef[k, a, r, c_]!r}\n")
                bid += 1
        G, h = p.inequalities()
        for r in range(G.shape[0]):
            row = G.getrow(r)
            fh.write("le " + " ".join(f"{j} {v!r}" for j, v in zip(row.indices, row.data)) + f" <= {h[r]!r}\n")
        E, f = p.equalities()
        for r in range(E.shape[0]):
            row = E.getrow(r)
            fh.write("eq " + " ".join(f"{j} {v!r}" for j, v in zip(row.indices, row.data)) + f" = {f[r]!r}\n")
