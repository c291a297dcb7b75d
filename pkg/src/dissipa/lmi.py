"""Assembly of the dissipation LMIs as affine functions of decision variables.

Three matrices are built here:

* the dissipation matrix at a vertex, with the storage gradient written as
  a linear map of the vertex values of its simplex;
* the per-vertex error matrix that bounds the Taylor remainders of the
  model fields over a simplex (added to the vertex matrix);
* the origin-ball matrix for a quadratic storage ``x^T P x``.

Decision variables for the weighting matrices are the diagonals ``d_z`` of
``Pi_z^{-1}``; each ``Pi_z`` also has a scalar ``pmin_z <= d_z,k`` standing in
for its smallest inverse diagonal.  With those choices every entry is affine.

Blocks are built in batches (:class:`BatchAffine`).  Before emission, rows
and columns that never couple to another row are split off: a
block-diagonal matrix is negative semidefinite iff each diagonal part is,
so the split is exact and turns most error-matrix rows into scalar linear
constraints.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.csgraph import connected_components

from .bounds import OriginBallData, SimplexDerivativeBounds
from .expr import evaluate, second_derivative_sup
from .mesh import SimplexGeometry, c_max_squared, c_origin
from .model import DynamicsModel
from .sdp.program import BlockGroup, ConicProgram, LMIBlock

__all__ = ["QSR_MODES", "Aff", "QsrParameterization", "preset_qsr", "DecisionVariableMap",
           "BatchAffine", "vertex_batch", "assemble_M", "assemble_error_E", "assemble_M_eps",
           "assemble_theorem3_bound", "assemble_theorem4_bound", "LMIError"]

QSR_MODES = ("l2_gain", "input_strictly_passive", "output_strictly_passive", "conic",
             "degenerate_conic", "fixed_qsr")


class LMIError(ValueError):
    pass


# -- small affine matrices ---------------------------------------------------------

@dataclass
class Aff:
    """Affine matrix ``const + sum y[v] * coef``."""

    const: np.ndarray
    terms: list = field(default_factory=list)

    @classmethod
    def constant(cls, value):
        return cls(np.atleast_2d(np.asarray(value, float)).copy())

    def value(self, y) -> np.ndarray:
        out = self.const.copy()
        for v, c in self.terms:
            out = out + y[v] * c
        return out

    def map(self, fn) -> "Aff":
        """Apply a linear map to the constant and every coefficient."""
        return Aff(fn(self.const), [(v, fn(c)) for v, c in self.terms])

    @property
    def is_zero(self) -> bool:
        return not np.any(self.const) and all(not np.any(c) for _, c in self.terms)


# -- QSR parameterization ------------------------------------------------------------

@dataclass
class QsrParameterization:
    """Supply-rate matrices as affine functions of the decision variables.

    Attributes
    ----------
    mode : str
    Qinv : Aff or None
        ``Q^{-1}``; None when ``Q = 0`` (the reduced LMI without the Q row).
    S : Aff
        ``p x m``.
    negR : Aff
        ``-R``, ``m x m``.
    shat : Aff
        1x1 upper bound on ``|S|_2``.
    variables : dict
        Names of the scalar design variables and their indices.
    """

    mode: str
    p: int
    m: int
    Qinv: Aff | None
    S: Aff
    negR: Aff
    shat: Aff
    variables: dict = field(default_factory=dict)
    Q_fixed: np.ndarray | None = None

    @property
    def has_Q(self) -> bool:
        return self.Qinv is not None

    @property
    def reduced(self) -> bool:
        return self.Qinv is None

    def realize(self, y) -> dict:
        """Numeric ``Q, S, R`` and the headline quantity at the solution ``y``."""
        S = self.S.value(y)
        R = -self.negR.value(y)
        if self.Qinv is None:
            Q = np.zeros((self.p, self.p))
        else:
            Q = np.linalg.inv(self.Qinv.value(y))
        v = {k: float(y[i]) for k, i in self.variables.items()}
        head = {}
        if self.mode == "l2_gain":
            head = {"gamma": float(np.sqrt(max(v["alpha"], 0.0))), "gamma_squared": v["alpha"]}
        elif self.mode == "input_strictly_passive":
            head = {"nu": v["alpha"]}
        elif self.mode == "output_strictly_passive":
            head = {"rho": 1.0 / v["tau"], "tau": v["tau"]}
        elif self.mode == "conic":
            al, be = v["alpha"], v["beta"]
            r = float(np.sqrt(max(al * al - be, 0.0)))
            head = {"a": al - r, "b": al + r, "alpha": al, "beta": be}
        elif self.mode == "degenerate_conic":
            head = {"d": v["alpha"]}
        return {"Q": Q, "S": S, "R": R, "headline": head}

    def supply(self, y, u, out):
        """``w(u, y) = y^T Q y + 2 y^T S u + u^T R u`` for batched ``u``, ``out``."""
        r = self.realize(y)
        return (np.einsum("...i,ij,...j->...", out, r["Q"], out)
                + 2 * np.einsum("...i,ij,...j->...", out, r["S"], u)
                + np.einsum("...i,ij,...j->...", u, r["R"], u))


def _sym_basis(n):
    """Symmetric unit matrices for the upper triangle of an ``n x n`` matrix."""
    out = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            E[i, j] = E[j, i] = 1.0
            out.append(E)
    return out


def preset_qsr(kind: str, program: ConicProgram, p: int, m: int, delta: float = 1e-9,
               Q=None, objective: dict | None = None) -> QsrParameterization:
    """Register the design variables, objective and side constraints of a preset.

    Parameters
    ----------
    kind : str
        One of :data:`QSR_MODES`.
    program : ConicProgram
        Receives variables, side constraints and objective coefficients.
    Q : array, optional
        Fixed ``Q <= 0`` for ``fixed_qsr``.
    objective : dict, optional
        Filled with ``{var index: coefficient}``; also written into
        ``program.c``.

    Side constraints use the slack ``delta`` for strict inequalities.
    """
    if kind not in QSR_MODES:
        raise LMIError(f"unsupported QSR mode {kind!r}; expected one of {', '.join(QSR_MODES)}")
    Ipm = np.eye(p, m)
    Ip, Im = np.eye(p), np.eye(m)
    obj = {}
    var = {}
    zero_pm = Aff.constant(np.zeros((p, m)))
    if kind == "l2_gain":
        a = int(program.add_variables(1, "alpha")[0])
        var["alpha"] = a
        program.add_linear_le([[a]], [[-1.0]], [-delta])
        obj[a] = 1.0
        q = QsrParameterization(kind, p, m, Aff.constant(-Ip), zero_pm, Aff(np.zeros((m, m)), [(a, -Im)]),
                                Aff.constant([[0.0]]), var)
    elif kind == "input_strictly_passive":
        a = int(program.add_variables(1, "alpha")[0])
        var["alpha"] = a
        program.add_linear_le([[a]], [[-1.0]], [-delta])
        obj[a] = -1.0
        q = QsrParameterization(kind, p, m, None, Aff.constant(0.5 * Ipm), Aff(np.zeros((m, m)), [(a, Im)]),
                                Aff.constant([[np.linalg.norm(0.5 * Ipm, 2)]]), var)
    elif kind == "output_strictly_passive":
        t = int(program.add_variables(1, "tau")[0])
        var["tau"] = t
        program.add_linear_le([[t]], [[-1.0]], [-delta])
        obj[t] = 1.0
        q = QsrParameterization(kind, p, m, Aff(np.zeros((p, p)), [(t, -Ip)]), Aff.constant(0.5 * Ipm),
                                Aff.constant(np.zeros((m, m))),
                                Aff.constant([[np.linalg.norm(0.5 * Ipm, 2)]]), var)
    elif kind == "conic":
        a, b, t, s = (int(i) for i in program.add_variables(4, "conic"))
        program.names[a], program.names[b], program.names[t], program.names[s] = "alpha", "beta", "t", "shat"
        var.update(alpha=a, beta=b, t=t, shat=s)
        program.add_linear_le([[b]], [[1.0]], [-delta])
        program.add_linear_le([[a, s], [a, s]], [[1.0, -1.0], [-1.0, -1.0]], [0.0, 0.0])
        # t >= alpha^2  <=>  [[t, alpha], [alpha, 1]] >= 0
        program.add_lmi(LMIBlock(np.array([[0.0, 0.0], [0.0, -1.0]]),
                                 [(t, np.array([[-1.0, 0.0], [0.0, 0.0]])),
                                  (a, np.array([[0.0, -1.0], [-1.0, 0.0]]))], "conic_epigraph"))
        obj[t] = 1.0
        obj[b] = -2.0
        q = QsrParameterization(kind, p, m, Aff.constant(-Ip), Aff(np.zeros((p, m)), [(a, Ipm)]),
                                Aff(np.zeros((m, m)), [(b, Im)]), Aff(np.zeros((1, 1)), [(s, np.ones((1, 1)))]),
                                var)
    elif kind == "degenerate_conic":
        a = int(program.add_variables(1, "alpha")[0])
        var["alpha"] = a
        program.add_linear_le([[a]], [[1.0]], [-delta])
        obj[a] = -1.0
        q = QsrParameterization(kind, p, m, None, Aff.constant(Ipm), Aff(np.zeros((m, m)), [(a, Im)]),
                                Aff.constant([[np.linalg.norm(Ipm, 2)]]), var)
    else:  # fixed_qsr
        if Q is None:
            raise LMIError("fixed_qsr needs a fixed Q")
        Q = np.atleast_2d(np.asarray(Q, float))
        if Q.shape != (p, p) or not np.allclose(Q, Q.T):
            raise LMIError("Q must be a symmetric p x p matrix")
        ev = np.linalg.eigvalsh(Q)
        if ev.max() > 1e-12:
            raise LMIError("Q must be negative semidefinite")
        if np.all(Q == 0):
            Qinv = None
        elif ev.max() < -1e-12:
            Qinv = Aff.constant(np.linalg.inv(Q))
        else:
            raise LMIError("Q must be either zero or negative definite")
        sv = program.add_variables(p * m, "S")
        S = Aff(np.zeros((p, m)), [])
        for k, v in enumerate(sv):
            E = np.zeros((p, m))
            E[k // m, k % m] = 1.0
            S.terms.append((int(v), E))
        basis = _sym_basis(m)
        rv = program.add_variables(len(basis), "R")
        negR = Aff(np.zeros((m, m)), [(int(v), -E) for v, E in zip(rv, basis)])
        s = int(program.add_variables(1, "shat")[0])
        var["shat"] = s
        # R >= 0  <=>  -R <= 0
        program.add_lmi(LMIBlock(np.zeros((m, m)), list(negR.terms), "R_psd"))
        # |S|_2 <= shat  <=>  [[shat I, S], [S^T, shat I]] >= 0
        terms = [(s, -np.eye(p + m))]
        for v, E in S.terms:
            C = np.zeros((p + m, p + m))
            C[:p, p:] = -E
            C[p:, :p] = -E.T
            terms.append((v, C))
        program.add_lmi(LMIBlock(np.zeros((p + m, p + m)), terms, "S_norm"))
        q = QsrParameterization(kind, p, m, Qinv, S, negR, Aff(np.zeros((1, 1)), [(s, np.ones((1, 1)))]),
                                var, Q_fixed=Q)
    c = program.c.copy()
    for i, v in obj.items():
        c[i] += v
    program.set_objective(c)
    if objective is not None:
        objective.update(obj)
    return q


# -- decision variables --------------------------------------------------------------

@dataclass
class DecisionVariableMap:
    """Indices of every decision variable in the program.

    Attributes
    ----------
    V : ndarray of int
        Per mesh vertex (``-1`` where the vertex carries no value).
    l : ndarray of int
        Gradient bound per simplex.
    d : dict
        ``{z: index array}`` for the diagonal of ``Pi_z^{-1}``.
    pmin : dict
        ``{z: index}`` of the minimum-diagonal auxiliary.
    P : ndarray of int or None
        Symmetric index matrix of the quadratic storage.
    lp : int or None
    """

    V: np.ndarray
    l: np.ndarray
    d: dict = field(default_factory=dict)
    pmin: dict = field(default_factory=dict)
    P: np.ndarray | None = None
    lp: int | None = None
    qsr: QsrParameterization | None = None

    def add_weight(self, program: ConicProgram, z: int, size: int):
        """Register ``d_z`` (length ``size``) and ``pmin_z <= d_z,k``; returns nothing."""
        if size == 0:
            self.d[z] = np.zeros(0, dtype=np.int64)
            return
        dz = program.add_variables(size, f"d{z}", lb=0.0)
        pz = int(program.add_variables(1, f"pmin{z}", lb=0.0)[0])
        program.add_linear_le(np.stack([np.full(size, pz), dz], axis=1),
                              np.tile([1.0, -1.0], (size, 1)), np.zeros(size))
        self.d[z] = dz
        self.pmin[z] = pz

    def P_aff(self) -> Aff:
        n = self.P.shape[0]
        terms = []
        for i in range(n):
            for j in range(i, n):
                E = np.zeros((n, n))
                E[i, j] = E[j, i] = 1.0
                terms.append((int(self.P[i, j]), E))
        return Aff(np.zeros((n, n)), terms)

    def P_value(self, y) -> np.ndarray:
        return np.asarray(y)[self.P]

    def counts(self) -> dict:
        return {"vertex_values": int(np.sum(self.V >= 0)), "gradient_bounds": int(len(self.l)),
                "weights": int(sum(len(v) for v in self.d.values())),
                "quadratic": 0 if self.P is None else int(self.P.shape[0] * (self.P.shape[0] + 1) // 2)}


# -- batched affine blocks ------------------------------------------------------------

class BatchAffine:
    """``K`` symmetric matrices with a shared block layout and shared slot keys.

    ``add(bi, bj, value, var)`` adds ``value`` (broadcast to
    ``(K, size_bi, size_bj)``) to block ``(bi, bj)`` and the transpose to
    ``(bj, bi)``; ``var`` is None (constant), an int or a ``(K,)`` index
    array.  Entries added with the same ``key`` share one slot.
    """

    def __init__(self, K: int, sizes):
        self.K = int(K)
        self.sizes = [int(s) for s in sizes]
        self.off = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        s = int(self.off[-1])
        self.size = s
        self.const = np.zeros((self.K, s, s))
        self.slots = {}

    def _target(self, var, key):
        if var is None:
            return self.const
        idx = np.broadcast_to(np.asarray(var, dtype=np.int64), (self.K,))
        if key is None:
            if np.ndim(var) != 0:
                raise LMIError("array-indexed slots need a key")
            key = ("var", int(var))
        slot = self.slots.get(key)
        if slot is None:
            slot = [idx.copy(), np.zeros((self.K, self.size, self.size))]
            self.slots[key] = slot
        elif not np.array_equal(slot[0], idx):
            raise LMIError(f"slot {key!r} reused with different variables")
        return slot[1]

    def add(self, bi: int, bj: int, value, var=None, key=None):
        ri, rj = self.sizes[bi], self.sizes[bj]
        if ri == 0 or rj == 0:
            return
        val = np.broadcast_to(np.asarray(value, float), (self.K, ri, rj))
        if not np.any(val):
            return
        T = self._target(var, key)
        si = slice(self.off[bi], self.off[bi + 1])
        sj = slice(self.off[bj], self.off[bj + 1])
        T[:, si, sj] += val
        if bi != bj:
            T[:, sj, si] += np.swapaxes(val, -1, -2)

    def add_aff(self, bi, bj, aff: Aff, scale=1.0):
        """Add an :class:`Aff` (same for all ``K``) times ``scale`` (scalar or ``(K,)``)."""
        sc = np.asarray(scale, float).reshape(-1, 1, 1) if np.ndim(scale) else scale
        self.add(bi, bj, sc * aff.const[None], None)
        for v, c in aff.terms:
            self.add(bi, bj, sc * c[None], v)

    def dense(self, k: int, y) -> np.ndarray:
        out = self.const[k].copy()
        for idx, coef in self.slots.values():
            out += y[idx[k]] * coef[k]
        return out

    def block(self, k: int, name: str = "") -> LMIBlock:
        terms = [(int(idx[k]), coef[k].copy()) for idx, coef in self.slots.values() if np.any(coef[k])]
        return LMIBlock(self.const[k].copy(), terms, name)

    def emit(self, program: ConicProgram, delta: float = 0.0, drop_blocks=(), name: str = "",
             split: bool = True) -> dict:
        """Add ``matrix <= -delta I`` for all ``K`` matrices to ``program``.

        Rows of blocks listed in ``drop_blocks`` are removed first.  With
        ``split`` the matrices are divided into the connected components of
        their joint sparsity pattern; scalar components become linear rows
        (deduplicated).  Returns counts of emitted blocks and rows.
        """
        keep = np.ones(self.size, bool)
        for b in drop_blocks:
            keep[self.off[b]:self.off[b + 1]] = False
        kidx = np.flatnonzero(keep)
        const = self.const[:, kidx][:, :, kidx]
        slots = [(idx, coef[:, kidx][:, :, kidx]) for idx, coef in self.slots.values()]
        s = len(kidx)
        if s == 0:
            return {"blocks": 0, "rows": 0}
        if split:
            pat = np.abs(const).sum(axis=0)
            for _, coef in slots:
                pat = pat + np.abs(coef).sum(axis=0)
            ncomp, labels = connected_components(pat > 0, directed=False)
        else:
            ncomp, labels = 1, np.zeros(s, dtype=int)
        stats = {"blocks": 0, "rows": 0}
        row_parts = []
        for cidx in range(ncomp):
            comp = np.flatnonzero(labels == cidx)
            sub_c = const[:, comp][:, :, comp] + delta * np.eye(len(comp))
            used = []
            for idx, coef in slots:
                sc = coef[:, comp][:, :, comp]
                if np.any(sc):
                    used.append((idx, sc))
            if len(comp) == 1 and split:
                if not used:
                    bad = sub_c[:, 0, 0] > 0
                    if np.any(bad):
                        row_parts.append((np.zeros((1, 1), np.int64), np.zeros((1, 1)),
                                          np.array([-float(sub_c[bad, 0, 0].max())])))
                    continue
                idx = np.stack([u[0] for u in used], axis=1)
                coef = np.stack([u[1][:, 0, 0] for u in used], axis=1)
                row_parts.append((idx, coef, -sub_c[:, 0, 0]))
                continue
            if not used:
                ev = np.linalg.eigvalsh(sub_c)[:, -1]
                if np.any(ev > 0):
                    raise LMIError(f"constant block {name} violates the slack")
                continue
            idx = np.stack([u[0] for u in used], axis=1)
            coef = np.stack([u[1] for u in used], axis=1)
            program.add_group(BlockGroup(sub_c, idx, coef, name))
            stats["blocks"] += self.K
        for idx, coef, rhs in row_parts:
            idx, coef, rhs = _dedupe_rows(idx, coef, rhs)
            program.add_linear_le(idx, coef, rhs)
            stats["rows"] += len(rhs)
        return stats


def _dedupe_rows(idx, coef, rhs):
    order = np.argsort(idx, axis=1, kind="stable")
    idx = np.take_along_axis(idx, order, axis=1)
    coef = np.take_along_axis(coef, order, axis=1)
    key = np.concatenate([idx.astype(float), coef, rhs[:, None]], axis=1)
    _, first = np.unique(key, axis=0, return_index=True)
    first = np.sort(first)
    return idx[first], coef[first], rhs[first]


# -- vertex matrices -------------------------------------------------------------------

def _layout(m, p, has_Q, with_error):
    """Block sizes: M rows [1, m, pQ] then error rows [p, m, pQ, mQ]."""
    pq = p if has_Q else 0
    mq = m if has_Q else 0
    if not with_error:
        return [1, m, pq]
    return [1, m, pq, p, m, pq, mq]


def vertex_batch(model: DynamicsModel, qsr: QsrParameterization, pts, T, vert_vars,
                 error: dict | None = None, include_M: bool = True) -> BatchAffine:
    """Dissipation matrices (plus error matrices) at ``K`` vertex points.

    Parameters
    ----------
    pts : (K, n)
        Vertex coordinates.
    T : (K, n, n+1)
        Gradient maps of the owning simplices (``grad V = T @ values``).
    vert_vars : (K, n+1) int
        Variable index of each simplex vertex value.
    error : dict, optional
        Error-matrix data: ``c`` (K,), ``beta`` (K,), ``rho`` (K, p),
        ``mu`` (K, m), ``theta`` (K,), ``l`` (K,) variable indices and
        ``vmap`` (:class:`DecisionVariableMap` with weights 1..3).
    include_M : bool
        When False only the error terms are filled in.
    """
    n, m, p = model.n, model.m, model.p
    pts = np.atleast_2d(np.asarray(pts, float))
    K = pts.shape[0]
    lay = _layout(m, p, qsr.has_Q, error is not None)
    B = BatchAffine(K, lay)
    if include_M:
        _fill_M(B, model, qsr, pts, T, vert_vars)
    if error is None:
        return B
    _fill_E(B, model, qsr, K, error)
    return B


def _fill_M(B, model, qsr, pts, T, vert_vars):
    n = model.n
    f = model.f_at(pts)            # (K, n)
    h = model.h_at(pts)            # (K, p)
    Gb = model.Gbar_at(pts)        # (K, n, m)
    Jb = model.Jbar_at(pts)        # (K, p, m)
    # (1,1) grad V^T f ; (1,2) 1/2 grad V^T Gbar
    for a in range(n + 1):
        ta = T[:, :, a]            # (K, n)
        B.add(0, 0, np.einsum("ki,ki->k", ta, f)[:, None, None], vert_vars[:, a], key=("V", a))
        B.add(0, 1, 0.5 * np.einsum("ki,kij->kj", ta, Gb)[:, None, :], vert_vars[:, a], key=("V", a))
    # (1,2) -h^T S
    B.add(0, 1, -np.einsum("kp,pm->km", h, qsr.S.const)[:, None, :])
    for v, c in qsr.S.terms:
        B.add(0, 1, -np.einsum("kp,pm->km", h, c)[:, None, :], v)
    # (2,2) -R - S^T Jbar - Jbar^T S
    def rhat(Sm):
        X = np.einsum("pa,kpb->kab", Sm, Jb)
        return -(X + np.swapaxes(X, -1, -2))
    B.add(1, 1, qsr.negR.const[None] + rhat(qsr.S.const))
    for v, c in qsr.negR.terms:
        B.add(1, 1, c[None], v)
    for v, c in qsr.S.terms:
        B.add(1, 1, rhat(c), v)
    if qsr.has_Q:
        B.add(0, 2, h[:, None, :])
        B.add(1, 2, np.swapaxes(Jb, -1, -2))
        B.add_aff(2, 2, qsr.Qinv)


def _fill_E(B, model, qsr, K, error):
    n, m, p = model.n, model.m, model.p
    vm: DecisionVariableMap = error["vmap"]
    c = np.asarray(error["c"], float)
    l = np.asarray(error["l"], dtype=np.int64)
    beta, rho, mu, theta = (np.asarray(error[k], float) for k in ("beta", "rho", "mu", "theta"))
    rho = rho.reshape(K, p)
    mu = mu.reshape(K, m)
    sq = np.sqrt(p * m)
    # (1,1) f_hat = n/2 beta c l
    B.add(0, 0, (0.5 * n * beta * c)[:, None, None], l, key="l")
    # (2,2) 1/2 Pi1^{-1} + 1/2 shat n sqrt(pm) theta c I
    for k, v in enumerate(vm.d[1]):
        E = np.zeros((m, m))
        E[k, k] = 0.5
        B.add(1, 1, E[None], int(v))
    Jhat = n * sq * theta * c           # (K,)
    B.add_aff(1, 1, qsr.shat.map(lambda s: float(s[0, 0]) * np.eye(m)), scale=0.5 * Jhat)
    # row 4: shat * h_hat, -2 pmin1
    hhat = n * c[:, None] * rho         # (K, p)
    if p:
        B.add_aff(3, 0, qsr.shat.map(lambda s: float(s[0, 0]) * np.ones((p, 1))), scale=hhat[:, :, None])
        B.add(3, 3, -2.0 * np.eye(p)[None], vm.pmin[1])
    # row 5: l * G_hat, -4 pmin1
    if m:
        B.add(4, 0, (n * c[:, None] * mu)[:, :, None], l, key="l")
        B.add(4, 4, -4.0 * np.eye(m)[None], vm.pmin[1])
    if qsr.has_Q:
        for k in range(p):
            E = np.zeros((p, p))
            E[k, k] = 0.5
            B.add(2, 2, E[None], int(vm.d[2][k]))
            B.add(2, 2, E[None], int(vm.d[3][k]))
            E2 = np.zeros((p, p))
            E2[k, k] = -2.0
            B.add(5, 5, E2[None], int(vm.d[2][k]))
        B.add(5, 0, hhat[:, :, None])
        B.add(6, 1, Jhat[:, None, None] * np.eye(m)[None])
        B.add(6, 6, -2.0 * np.eye(m)[None], vm.pmin[3])


def assemble_M(model: DynamicsModel, qsr: QsrParameterization, x, grad_map, value_vars) -> LMIBlock:
    """Dissipation matrix at the point ``x`` (no error terms).

    ``grad_map`` is the ``(n, n+1)`` matrix with ``grad V = grad_map @ values``
    and ``value_vars`` the variable indices of the ``n + 1`` values.
    """
    B = vertex_batch(model, qsr, np.asarray(x, float)[None], np.asarray(grad_map)[None],
                     np.asarray(value_vars, dtype=np.int64)[None])
    return B.block(0, "M")


def assemble_error_E(model: DynamicsModel, qsr: QsrParameterization, bounds: SimplexDerivativeBounds,
                     geometry: SimplexGeometry, j: int, vmap: DecisionVariableMap, l_var: int) -> LMIBlock:
    """Error matrix at vertex ``j`` of a simplex, in the full 7-row layout.

    The dissipation-matrix rows are left at zero; add to :func:`assemble_M`
    padded with zeros (the first three block rows coincide).
    """
    if geometry.contains_origin and np.all(geometry.vertices[j] == 0):
        raise LMIError("the error matrix is not imposed at the origin vertex")
    err = {"c": [geometry.c[j]], "beta": [bounds.beta], "rho": np.asarray(bounds.rho)[None],
           "mu": np.asarray(bounds.mu)[None], "theta": [bounds.theta], "l": [l_var], "vmap": vmap}
    Bt = vertex_batch(model, qsr, geometry.vertices[j][None], None, None, err, include_M=False)
    return Bt.block(0, "E")


# -- origin ball ------------------------------------------------------------------------

def assemble_M_eps(model: DynamicsModel, qsr: QsrParameterization, ball: OriginBallData,
                   vmap: DecisionVariableMap) -> BatchAffine:
    """Origin-ball matrix for the quadratic storage ``x^T P x`` (one block).

    Block rows ``[n, m, pQ, n, n, n, nQ, mQ, mQ]``; the Q-coupled rows are
    absent when ``Q = 0``.  Weight indices: 4, 5, 6 act on the input block
    (length ``m``), 7, 8, 9 on the output block (length ``p``).
    """
    if ball is None:
        raise LMIError("origin-ball data missing")
    n, m, p = model.n, model.m, model.p
    hq = qsr.has_Q
    sizes = [n, m, p if hq else 0, n, n, n, n if hq else 0, m if hq else 0, m if hq else 0]
    Bt = BatchAffine(1, sizes)
    eps = ball.epsilon
    P = vmap.P_aff()
    lp = vmap.lp
    In, Im = np.eye(n), np.eye(m)
    # Xi_1 = P J_f + J_f^T P + l_p n^{3/2} beta_eps eps I
    Bt.add_aff(0, 0, P.map(lambda X: X @ ball.J_f + ball.J_f.T @ X))
    Bt.add(0, 0, (n ** 1.5 * ball.beta_eps * eps * In)[None], lp)
    # (2,1) = B^T P - S^T J_h
    Bt.add_aff(1, 0, P.map(lambda X: model.B.T @ X))
    Bt.add_aff(1, 0, qsr.S.map(lambda S: -S.T @ ball.J_h))
    # Xi_2
    D = model.D
    Bt.add_aff(1, 1, qsr.negR)
    Bt.add_aff(1, 1, qsr.S.map(lambda S: -(S.T @ D + D.T @ S)))
    for z, w in ((4, 1.0), (5, 0.5), (6, 0.5)):
        for k, v in enumerate(vmap.d[z]):
            E = np.zeros((m, m))
            E[k, k] = w
            Bt.add(1, 1, E[None], int(v))
    sJj, sJg = ball.sum_norm_Jj, ball.sum_norm_Jg
    coef_s = 2.0 * eps * sJj + np.sqrt(m * p) * n * eps ** 2 * ball.theta_eps
    Bt.add_aff(1, 1, qsr.shat.map(lambda s: float(s[0, 0]) * coef_s * Im))
    # row 4: l_p eps sqrt(sum |J_gk|^2) I, -pmin4
    Bt.add(3, 0, (eps * sJg * In)[None], lp)
    Bt.add(3, 3, -In[None], vmap.pmin[4])
    # row 5: shat eps n sqrt(p) rho_eps I, -2 pmin5
    Bt.add_aff(4, 0, qsr.shat.map(lambda s: float(s[0, 0]) * eps * n * np.sqrt(p) * ball.rho_eps * In))
    Bt.add(4, 4, -2.0 * In[None], vmap.pmin[5])
    # row 6: l_p sqrt(m) n^{3/2} eps^2 mu_eps I, -2 pmin6
    Bt.add(5, 0, (np.sqrt(m) * n ** 1.5 * eps ** 2 * ball.mu_eps * In)[None], lp)
    Bt.add(5, 5, -2.0 * In[None], vmap.pmin[6])
    if hq:
        Ip = np.eye(p)
        Bt.add(2, 0, ball.J_h[None])
        Bt.add(2, 1, D[None])
        Bt.add_aff(2, 2, qsr.Qinv)
        for z, w in ((7, 0.5), (9, 0.5), (8, 1.0)):
            for k, v in enumerate(vmap.d[z]):
                E = np.zeros((p, p))
                E[k, k] = w
                Bt.add(2, 2, E[None], int(v))
        Bt.add(6, 0, (eps * n * np.sqrt(p) * ball.rho_eps * In)[None])
        Bt.add(6, 6, -2.0 * In[None], vmap.pmin[7])
        Bt.add(7, 1, (eps * sJj * Im)[None])
        Bt.add(7, 7, -Im[None], vmap.pmin[8])
        Bt.add(8, 1, (np.sqrt(m * p) * n * ball.theta_eps * eps ** 2 * Im)[None])
        Bt.add(8, 8, -2.0 * Im[None], vmap.pmin[9])
    return Bt


# -- generic bounds used by the soundness probes --------------------------------------------

def _hess_sup(e, box, n, mode):
    return float(second_derivative_sup(e, np.asarray(box, float), n=n, mode=mode))


def assemble_theorem3_bound(phi, zeta, vertices, Pi, mode: str = "interval"):
    """Vertex matrices ``M(x_j)`` and error matrices ``E(x_j)`` of the generic bound.

    ``M(x) = [[phi(x), zeta(x)^T], [zeta(x), -I]]`` padded with a zero third
    block row; ``E(x_j) = [[phi_hat_j / 2, 0, zeta_hat_j^T], [0, Pi^{-1}/2, 0],
    [zeta_hat_j, 0, -2 Pi^{-1}]]``.  The remainder constants are
    ``phi_hat_j = n mu_phi c_j`` and ``zeta_hat_j,k = n mu_k c_j`` with ``c``
    from the expansion about an interior point, or about the origin vertex
    when the simplex contains the origin.

    Returns
    -------
    M : (n+1, 1+2m, 1+2m)
    E : (n+1, 1+2m, 1+2m)
    """
    V = np.asarray(vertices, float)
    n = V.shape[1]
    m = len(zeta)
    Pi = np.asarray(Pi, float).reshape(m)
    norms = np.linalg.norm(V, axis=1)
    has_o = bool(np.any(norms == 0))
    if has_o:
        j0 = int(np.argmin(norms))
        V = np.concatenate([V[j0:j0 + 1], np.delete(V, j0, axis=0)])
        c = c_origin(V)
    else:
        c = c_max_squared(V)
    box = np.stack([V.min(axis=0), V.max(axis=0)], axis=1)
    mu_phi = _hess_sup(phi, box, n, mode)
    mu_z = np.array([_hess_sup(z, box, n, mode) for z in zeta])
    s = 1 + 2 * m
    M = np.zeros((n + 1, s, s))
    E = np.zeros((n + 1, s, s))
    for j in range(n + 1):
        x = V[j]
        M[j, 0, 0] = evaluate(phi, x)
        zv = np.array([evaluate(z, x) for z in zeta])
        M[j, 0, 1:1 + m] = zv
        M[j, 1:1 + m, 0] = zv
        M[j, 1:1 + m, 1:1 + m] = -np.eye(m)
        E[j, 0, 0] = 0.5 * n * mu_phi * c[j]
        E[j, 1:1 + m, 1:1 + m] = 0.5 * np.diag(1.0 / Pi)
        zh = n * mu_z * c[j]
        E[j, 1 + m:, 0] = zh
        E[j, 0, 1 + m:] = zh
        E[j, 1 + m:, 1 + m:] = -2.0 * np.diag(1.0 / Pi)
    return M, E, V


def assemble_theorem4_bound(theta, zeta, epsilon: float, Pi, mode: str = "interval") -> np.ndarray:
    """Origin-ball matrix bounding ``zeta^T zeta + x^T theta(x) <= 0`` on the ball.

    Block rows ``[n, m, n]``::

        [[ (J_t + J_t^T + sqrt(n) th eps I) / 2, J_z^T,              sqrt(m) zh eps I ],
         [ J_z,                                 -I + Pi^{-1} / 2,   0                ],
         [ sqrt(m) zh eps I,                    0,                  -2 pmin I        ]]

    with ``th``, ``zh`` bounds on the spectral norms of the component
    Hessians (``n`` times the largest entry) over the cube of half-width
    ``epsilon`` and ``pmin`` the smallest diagonal of ``Pi^{-1}``.  The
    ``sqrt(n)`` and ``sqrt(m)`` factors make the bound valid in every
    dimension; for ``n = m = 1`` the matrix is the textbook one.
    """
    n = len(theta)
    m = len(zeta)
    Pi = np.asarray(Pi, float).reshape(m)
    box = np.tile([[-epsilon, epsilon]], (n, 1))
    th = n * max((_hess_sup(t, box, n, mode) for t in theta), default=0.0)
    zh = n * max((_hess_sup(z, box, n, mode) for z in zeta), default=0.0)
    from .expr import differentiate
    z0 = np.zeros(n)
    Jt = np.array([[evaluate(differentiate(t, i), z0) for i in range(n)] for t in theta]).reshape(n, n)
    Jz = np.array([[evaluate(differentiate(z, i), z0) for i in range(n)] for z in zeta]).reshape(m, n)
    pmin = float(np.min(1.0 / Pi)) if m else 1.0
    s = 2 * n + m
    M = np.zeros((s, s))
    M[:n, :n] = 0.5 * (Jt + Jt.T + np.sqrt(n) * th * epsilon * np.eye(n))
    M[n:n + m, :n] = Jz
    M[:n, n:n + m] = Jz.T
    M[n:n + m, n:n + m] = -np.eye(m) + 0.5 * np.diag(1.0 / Pi)
    M[n + m:, :n] = np.sqrt(m) * zh * epsilon * np.eye(n)
    M[:n, n + m:] = np.sqrt(m) * zh * epsilon * np.eye(n)
    M[n + m:, n + m:] = -2.0 * pmin * np.eye(n)
    return M
