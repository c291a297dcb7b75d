"""Primal-dual interior-point method for block-diagonal semidefinite programs.

Internal form (dual standard form)::

    maximise  b @ y      s.t.  Z = C - A^T y  >= 0 (psd),   E y = f

with ``b = -c``.  An LMI block ``F0 + sum y_i F_i <= 0`` maps to ``C = -F0``
and ``A_i = F_i``; a linear row ``g @ y <= h`` is a 1x1 block.  The primal
is ``min <C, X> + f @ w  s.t.  A(X) + E^T w = b,  X >= 0``.

Search directions use Nesterov-Todd scaling with a Mehrotra
predictor-corrector.  The Schur complement ``H_ab = <A_a, W A_b W>`` is
assembled into a fixed CSC pattern (computed once) by the kernels in
:mod:`dissipa._kernels` and factorised with a sparse LU.
"""
from __future__ import annotations

import sys
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .. import _kernels as K
from .program import ConicProgram, SolverSettings

__all__ = ["IPMResult", "solve_ipm"]

_DENSE_LIMIT = 600


@dataclass
class _Cone:
    C: np.ndarray     # (K, s, s)
    idx: np.ndarray   # (K, v) int64
    A: np.ndarray     # (K, v, s, s)
    pos: np.ndarray = None  # (K, v, v) positions into the Schur data

    @property
    def s(self):
        return self.C.shape[1]

    @property
    def nu(self):
        return self.C.shape[0] * self.C.shape[1]


@dataclass
class IPMResult:
    status: str
    y: np.ndarray
    primal_obj: float  # c @ y
    dual_bound: float
    iterations: int
    info: dict


def _compile(p: ConicProgram):
    """Collect cones (blocks and 1x1 linear rows), equalities and ``b``."""
    cones = []
    trivial_bad = 0.0
    for g in p.groups:
        if g.count == 0:
            continue
        if g.index.shape[1] == 0:
            trivial_bad = max(trivial_bad, float(np.linalg.eigvalsh(g.constant)[:, -1].max()))
            continue
        cones.append(_Cone(-g.constant.astype(float), g.index.astype(np.int64), g.coef.astype(float)))
    G, h = p.inequalities()
    G = G.tocsr()
    G.eliminate_zeros()
    if G.shape[0]:
        cnt = np.diff(G.indptr)
        empty = cnt == 0
        if empty.any():
            trivial_bad = max(trivial_bad, float(np.max(-h[empty])))
        for q in np.unique(cnt[~empty]):
            rows = np.flatnonzero(cnt == q)
            starts = G.indptr[rows]
            take = starts[:, None] + np.arange(q)[None]
            idx = G.indices[take].astype(np.int64)
            val = G.data[take]
            cones.append(_Cone(h[rows].reshape(-1, 1, 1).astype(float), idx, val.reshape(len(rows), q, 1, 1)))
    E, f = p.equalities()
    E = E.tocsr()
    return cones, E, f, -p.c.copy(), trivial_bad


def _schur_pattern(cones, N, E):
    """CSC pattern of the Schur matrix; fills ``cone.pos``."""
    rows, cols = [np.arange(N)], [np.arange(N)]
    for cn in cones:
        v = cn.idx.shape[1]
        rows.append(np.repeat(cn.idx, v, axis=1).ravel())
        cols.append(np.tile(cn.idx, (1, v)).ravel())
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    key = c * N + r
    ukey = np.unique(key)
    ur, uc = ukey % N, ukey // N
    for cn in cones:
        v = cn.idx.shape[1]
        kk = (np.tile(cn.idx, (1, v)) * N + np.repeat(cn.idx, v, axis=1)).reshape(-1, v, v)
        cn.pos = np.searchsorted(ukey, kk).astype(np.int64)
    diag_pos = np.searchsorted(ukey, np.arange(N) * N + np.arange(N))
    indptr = np.searchsorted(uc, np.arange(N + 1))
    return ur.astype(np.int32), indptr.astype(np.int32), len(ukey), diag_pos


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _nt(X, Z):
    """Nesterov-Todd scaling ``G`` (W = G G^T), its inverse and ``lambda``."""
    s = X.shape[1]
    if s == 1:
        x, z = X[:, 0, 0], Z[:, 0, 0]
        g = (x / z) ** 0.25
        return g[:, None, None], (1.0 / g)[:, None, None], np.sqrt(x * z)[:, None]
    Lx = np.linalg.cholesky(X)
    Lz = np.linalg.cholesky(Z)
    M = np.swapaxes(Lz, -1, -2) @ Lx
    U, sig, Vt = np.linalg.svd(M)
    V = np.swapaxes(Vt, -1, -2)
    rs = 1.0 / np.sqrt(sig)
    Gm = Lx @ V * rs[:, None, :]
    Lxi = np.linalg.inv(Lx)
    Gi = (np.sqrt(sig)[:, :, None] * Vt) @ Lxi
    return Gm, Gi, sig


def _max_step(Gi, lam, D, transpose=False):
    """Largest ``a`` with the scaled iterate ``Lambda + a * D~`` psd."""
    if Gi.shape[1] == 1:
        d = (Gi[:, 0, 0] ** 2) * D[:, 0, 0] if not transpose else D[:, 0, 0] * Gi[:, 0, 0] ** 2
        r = d / lam[:, 0]
        mn = r.min(initial=0.0)
        return np.inf if mn >= 0 else -1.0 / mn
    if transpose:
        Dt = np.swapaxes(Gi, -1, -2) @ D @ Gi
    else:
        Dt = Gi @ D @ np.swapaxes(Gi, -1, -2)
    il = 1.0 / np.sqrt(lam)
    M = _sym(il[:, :, None] * Dt * il[:, None, :])
    mn = float(np.linalg.eigvalsh(M)[:, 0].min())
    return np.inf if mn >= 0 else -1.0 / mn


_LOOSE_PINF = 1e-4
_BREAKDOWN = ("lost positive definiteness", "singular Schur complement")


class _Schur:
    def __init__(self, N, ur, indptr, nnz, diag_pos, E, unused):
        self.N, self.ur, self.indptr, self.nnz = N, ur, indptr, nnz
        self.diag_pos = diag_pos
        self.E = E
        self.unused = unused
        self.dense = N + E.shape[0] <= _DENSE_LIMIT

    def factor(self, vals):
        vals = vals.copy()
        vals[self.diag_pos[self.unused]] += 1.0
        H0 = sp.csc_matrix((vals.copy(), self.ur, self.indptr), shape=(self.N, self.N))
        d = vals[self.diag_pos]
        scale = max(float(np.abs(d).max(initial=0.0)), 1.0)
        # relative diagonal regularization; refinement below runs against the exact matrix
        vals[self.diag_pos] += 1e-13 * np.abs(d) + 1e-30 * scale
        H = sp.csc_matrix((vals, self.ur, self.indptr), shape=(self.N, self.N))
        self.H = H
        m = self.E.shape[0]
        if m:
            reg = 1e-12 * scale
            Kmat = sp.bmat([[H, self.E.T], [self.E, -reg * sp.eye(m)]], format="csc")
            self.K0 = sp.bmat([[H0, self.E.T], [self.E, None]], format="csc")
        else:
            Kmat = H
            self.K0 = H0
        self.K = Kmat
        if self.dense:
            Kd = Kmat.toarray()
            if not m:
                try:
                    self.chol = sla.cho_factor(Kd, lower=True, check_finite=False)
                    self.lu = None
                    return
                except np.linalg.LinAlgError:
                    pass
            self.chol = None
            self.lu = sla.lu_factor(Kd, check_finite=False)
        else:
            self.chol = None
            self.lu = spla.splu(Kmat, permc_spec="MMD_AT_PLUS_A",
                                options=dict(SymmetricMode=True), diag_pivot_thresh=0.0)

    def _raw(self, rhs):
        if self.chol is not None:
            return sla.cho_solve(self.chol, rhs, check_finite=False)
        if self.dense:
            return sla.lu_solve(self.lu, rhs, check_finite=False)
        return self.lu.solve(rhs)

    def solve(self, r1, r2):
        rhs = np.concatenate([r1, r2])
        sol = self._raw(rhs)
        for _ in range(3):
            res = rhs - self.K0 @ sol
            sol = sol + self._raw(res)
        return sol[: self.N], sol[self.N:]


def solve_ipm(p: ConicProgram, settings: SolverSettings = None, accept=None,
              obj_scale: float = 1.0) -> IPMResult:
    """Run the interior-point method on ``p``.

    Parameters
    ----------
    accept : callable, optional
        ``accept(y) -> bool`` evaluated when the internal stopping test
        passes; iterations continue while it returns False.
    obj_scale : float
        Factor mapping objective values of ``p`` to the user's units; the
        relative gap is measured in those units.
    """
    st = settings or SolverSettings()
    t0 = time.perf_counter()
    N = p.n_vars
    cones, E, f, b, trivial_bad = _compile(p)
    if trivial_bad > st.feas_tol:
        return IPMResult("infeasible", np.zeros(N), 0.0, np.inf, 0, {"reason": "constant block violated"})
    used = np.zeros(N, bool)
    for cn in cones:
        used[np.unique(cn.idx)] = True
    if E.shape[0]:
        used[np.unique(E.indices)] = True
    unused = np.flatnonzero(~used)
    if np.any(b[unused] != 0):
        return IPMResult("unbounded", np.zeros(N), -np.inf, -np.inf, 0,
                         {"reason": "objective variable in no constraint"})
    ur, indptr, nnz, diag_pos = _schur_pattern(cones, N, E)
    schur = _Schur(N, ur, indptr, nnz, diag_pos, E, unused)
    mE = E.shape[0]
    ET = E.T.tocsr()

    def A_adj(Xs):
        out = np.zeros(N)
        for cn, X in zip(cones, Xs):
            out += K.adjoint(cn.A, cn.idx, X, N)
        return out

    def A_fwd(y):
        return [K.forward(cn.A, cn.idx, y) for cn in cones]

    nu = sum(cn.nu for cn in cones)
    normb = 1.0 + np.linalg.norm(b)
    normC = 1.0 + np.sqrt(sum(np.sum(cn.C ** 2) for cn in cones))
    normf = 1.0 + np.linalg.norm(f)
    # starting point
    colnorm = np.sqrt(A_adj([np.ones_like(cn.C) for cn in cones]) ** 2 + 1e-300)
    xi = max(10.0, float(np.max((1.0 + np.abs(b)) / (1.0 + colnorm))) if N else 10.0)
    Xs, Zs = [], []
    for cn in cones:
        s = cn.s
        eta = max(10.0, np.sqrt(s), float(np.sqrt(np.max(np.sum(cn.C ** 2, axis=(1, 2))))),
                  float(np.sqrt(np.max(np.sum(cn.A ** 2, axis=(2, 3))))))
        Xs.append(np.broadcast_to(xi * np.eye(s), cn.C.shape).copy())
        Zs.append(np.broadcast_to(eta * np.eye(s), cn.C.shape).copy())
    y = np.zeros(N)
    w = np.zeros(mE)
    info = {"nu": nu, "cones": len(cones), "schur_nnz": nnz}
    status = "numerical_trouble"
    it = 0
    stall = 0
    last = None
    extra_tight = 1.0
    slow = 0
    for it in range(1, st.max_iter + 1):
        AX = A_adj(Xs)
        Aty = A_fwd(y)
        Rd = [cn.C - a - Z for cn, a, Z in zip(cones, Aty, Zs)]
        rp = b - AX - (ET @ w if mE else 0.0)
        re = f - E @ y if mE else np.zeros(0)
        pobj = float(sum(np.sum(cn.C * X) for cn, X in zip(cones, Xs)) + f @ w)  # primal (min)
        dobj = float(b @ y)  # dual (max)
        gap = sum(float(np.sum(X * Z)) for X, Z in zip(Xs, Zs))
        mu = gap / nu
        pinf = (np.linalg.norm(rp)) / normb
        dinf = np.sqrt(sum(np.sum(r ** 2) for r in Rd)) / normC
        einf = np.linalg.norm(re) / normf if mE else 0.0
        relgap = obj_scale * abs(pobj - dobj) / (1.0 + obj_scale * (abs(pobj) + abs(dobj)))
        if st.verbosity >= 2:
            print(f"{it:3d} p={pobj:+.6e} d={dobj:+.6e} gap={relgap:.1e} pinf={pinf:.1e} "
                  f"dinf={dinf:.1e} mu={mu:.1e}", file=sys.stderr)
        tol_f, tol_g = st.feas_tol * extra_tight, st.gap_tol * extra_tight
        if max(dinf, einf) <= tol_f and pinf <= tol_f and (relgap <= tol_g or gap <= tol_g * 1e-3):
            if accept is None or accept(y):
                status = "optimal"
                break
            extra_tight *= 0.1
            if extra_tight < 1e-6:
                status = "numerical_trouble"
                break
        # infeasibility certificates
        pr = -pobj
        if pr > 0:
            ray = np.linalg.norm(AX + (ET @ w if mE else 0.0)) / pr
            if ray < st.infeas_tol and dinf > tol_f:
                status = "infeasible"
                break
        if dobj > 0:
            ray = np.sqrt(sum(np.sum((a + Z) ** 2) for a, Z in zip(Aty, Zs))) / dobj
            if ray < st.infeas_tol and pinf > tol_f:
                status = "unbounded"
                break
        # scaling and Schur complement
        try:
            nts = [_nt(X, Z) for X, Z in zip(Xs, Zs)]
        except np.linalg.LinAlgError:
            status = "numerical_trouble"
            info["reason"] = "lost positive definiteness"
            break
        Ws = [Gm @ np.swapaxes(Gm, -1, -2) for Gm, _, _ in nts]
        vals = np.zeros(nnz)
        for cn, W in zip(cones, Ws):
            vals += K.schur_values(cn.A, W, cn.pos, nnz)
        try:
            schur.factor(vals)
        except (RuntimeError, np.linalg.LinAlgError, ValueError):
            status = "numerical_trouble"
            info["reason"] = "singular Schur complement"
            break
        WRW = [W @ R @ W for W, R in zip(Ws, Rd)]
        AWRW = A_adj(WRW)

        def direction(Rc):
            r1 = rp - A_adj(Rc) + AWRW
            dy, dw = schur.solve(r1, re)
            dZ = [R - a for R, a in zip(Rd, A_fwd(dy))]
            dX = [_sym(Rc_ - W @ dz @ W) for Rc_, W, dz in zip(Rc, Ws, dZ)]
            return dy, dw, dX, dZ

        def steps(dX, dZ):
            ap, ad = np.inf, np.inf
            for (Gm, Gi, lam), dx, dz in zip(nts, dX, dZ):
                ap = min(ap, _max_step(Gi, lam, dx))
                ad = min(ad, _max_step(Gm, lam, dz, transpose=True))
            return ap, ad

        # predictor
        dy, dw, dX, dZ = direction([-X for X in Xs])
        ap, ad = steps(dX, dZ)
        ap, ad = min(1.0, ap), min(1.0, ad)
        gap_aff = sum(float(np.sum((X + ap * dx) * (Z + ad * dz))) for X, Z, dx, dz in zip(Xs, Zs, dX, dZ))
        sigma = min(1.0, max(0.0, gap_aff / gap) ** 3) if gap > 0 else 0.0
        # corrector
        Rc = []
        for (Gm, Gi, lam), dx, dz in zip(nts, dX, dZ):
            dxt = Gi @ dx @ np.swapaxes(Gi, -1, -2)
            dzt = np.swapaxes(Gm, -1, -2) @ dz @ Gm
            corr = _sym(dxt @ dzt)
            s = lam.shape[1]
            T = -corr
            ii = np.arange(s)
            T[:, ii, ii] += sigma * mu - lam ** 2
            T = T * 2.0 / (lam[:, :, None] + lam[:, None, :])
            Rc.append(_sym(Gm @ T @ np.swapaxes(Gm, -1, -2)))
        dy, dw, dX, dZ = direction(Rc)
        ap, ad = steps(dX, dZ)
        ap = min(1.0, st.step_fraction * ap)
        ad = min(1.0, st.step_fraction * ad)
        Xs = [_sym(X + ap * dx) for X, dx in zip(Xs, dX)]
        Zs = [_sym(Z + ad * dz) for Z, dz in zip(Zs, dZ)]
        y = y + ad * dy
        if st.verbosity >= 3:
            worst = np.argsort(-np.abs(rp))[:5]
            print(f"    ap={ap:.2e} ad={ad:.2e} sigma={sigma:.2e} worst_rp={list(zip(worst.tolist(), rp[worst].round(8).tolist()))}",
                  file=sys.stderr)
        if mE:
            w = w + ap * dw
        if max(ap, ad) < 1e-9:
            stall += 1
            if stall >= 3:
                info["reason"] = "step length collapse"
                break
        else:
            stall = 0
        # slow progress near a degenerate face: the multiplier residual stops
        # shrinking while y is already feasible and the gap closed
        if last is not None and pinf > 0.5 * last[0] and relgap <= st.gap_tol and dinf <= tol_f:
            slow += 1
        else:
            slow = 0
        last = (pinf, dinf, relgap)
        if slow >= 5 or stall:
            if pinf <= _LOOSE_PINF and relgap <= st.gap_tol and (accept is None or accept(y)):
                status = "optimal"
                info["reduced_accuracy"] = True
                info["reason"] = f"stalled with multiplier residual {pinf:.1e}"
                break
            if slow >= 15:
                info["reason"] = "no progress"
                break
    else:
        info["reason"] = "iteration limit"
    # a factorization breakdown right at the optimum: same acceptance as a stall
    if (status == "numerical_trouble" and info.get("reason") in _BREAKDOWN and pinf <= _LOOSE_PINF
            and relgap <= st.gap_tol and max(dinf, einf) <= st.feas_tol
            and (accept is None or accept(y))):
        status = "optimal"
        info["reduced_accuracy"] = True
        info["reason"] = f"{info['reason']} with multiplier residual {pinf:.1e}"
    info["time"] = time.perf_counter() - t0
    info["last"] = last
    pobj = float(sum(np.sum(cn.C * X) for cn, X in zip(cones, Xs)) + f @ w)
    return IPMResult(status, y, float(-b @ y), -pobj, it, info)
