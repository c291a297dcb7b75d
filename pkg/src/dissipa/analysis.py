"""End-to-end dissipativity analysis: mesh in, QSR parameters and storage out.

Two program variants are provided.

``no_affine``
    For models with ``B = 0`` and ``D = 0``.  The storage is a CPA function
    on a triangulation of the whole box, pinned to zero at the origin.
``with_affine``
    For models with constant input or feedthrough terms.  The origin cell
    block ``Psi`` is removed from the mesh; a quadratic ``x^T P x`` certifies
    the ball of radius ``epsilon`` and the CPA function the rest.  The
    storage is ``x^T P x`` on ``Psi``, ``min(x^T P x, CPA)`` on the ball
    outside ``Psi`` and the CPA function elsewhere.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds import origin_ball_data, sign_patterns, triangulation_bounds
from .lmi import BatchAffine, DecisionVariableMap, assemble_M_eps, preset_qsr, vertex_batch
from .mesh import MeshError, Triangulation, cpa_gradient_matrix, kuhn_triangulate, locate
from .model import DynamicsModel
from .sdp import ConicProgram, LMIBlock, SolverSettings, solve

__all__ = ["AnalysisRequest", "StorageCertificate", "AnalysisResult", "AnalysisError", "analyze",
           "analyze_no_affine", "analyze_with_affine", "build_program", "evaluate_storage",
           "storage_gradient", "export_storage_csv"]

log = logging.getLogger(__name__)

VARIANTS = ("auto", "no_affine", "with_affine")


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisRequest:
    """Everything needed to set up one program.

    Attributes
    ----------
    model : DynamicsModel
    region : (n, 2) array
    divisions : int or sequence of int
        Grid cells per axis.
    mode : str
        QSR preset.
    variant : {"auto", "no_affine", "with_affine"}
        ``"auto"`` picks ``with_affine`` when ``B`` or ``D`` is nonzero.
    Q : array, optional
        Fixed ``Q`` for ``fixed_qsr``.
    epsilon : float, optional
        Origin-ball radius; default ``2 * w * sqrt(n)`` with ``w`` the
        half-width of ``Psi`` (``2 * spacing * sqrt(n)`` for one cell).
    exclusion_cells : int
        Half-width of ``Psi`` in grid cells.
    exclusion_halfwidth : float, optional
        Target half-width of ``Psi``; rounded to a whole number of cells
        (at least one) and overriding ``exclusion_cells``.
    delta : float
        Slack for strict inequalities.
    bound_mode : {"interval", "sampled"}
    solver : SolverSettings
    refine_cap : int
        Number of automatic refinements (divisions doubled) after an
        infeasible solve.
    verify : bool
        Run the sampling and simulation checks before reporting success.
    """

    model: DynamicsModel
    region: tuple
    divisions: tuple
    mode: str = "l2_gain"
    variant: str = "auto"
    Q: tuple | None = None
    epsilon: float | None = None
    exclusion_cells: int = 1
    exclusion_halfwidth: float | None = None
    delta: float = 1e-9
    bound_mode: str = "interval"
    solver: SolverSettings = field(default_factory=lambda: SolverSettings(feas_tol=1e-8))
    refine_cap: int = 0
    verify: bool = True
    verify_samples: int = 200
    verify_trials: int = 100
    verify_horizon: float = 5.0
    input_cap: float = 1.0
    seed: int = 0

    def resolved_variant(self) -> str:
        if self.variant not in VARIANTS:
            raise AnalysisError(f"unknown variant {self.variant!r}")
        if self.variant == "auto":
            return "with_affine" if self.model.has_affine_terms else "no_affine"
        return self.variant

    def region_array(self) -> np.ndarray:
        return np.atleast_2d(np.asarray(self.region, float)).reshape(self.model.n, 2)

    def divisions_array(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.divisions, int), (self.model.n,)).copy()


@dataclass
class StorageCertificate:
    """Storage function returned by a solve.

    Attributes
    ----------
    variant : str
    tri : Triangulation
    values : (V,) array
        CPA value at every mesh vertex.
    P : (n, n) array or None
        Quadratic part (``with_affine`` only).
    epsilon : float
    """

    variant: str
    tri: Triangulation
    values: np.ndarray
    P: np.ndarray | None = None
    epsilon: float = 0.0

    @property
    def gradients(self) -> np.ndarray:
        """CPA gradient on every simplex, ``(K, n)``."""
        T = cpa_gradient_matrix(self.tri.X_inv)
        return np.einsum("kij,kj->ki", T, self.values[self.tri.simplices])

    @property
    def exclusion(self):
        return self.tri.exclusion

    def in_exclusion(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        ex = self.tri.exclusion
        if ex is None:
            return np.zeros(len(x), bool)
        return np.all((x >= ex[:, 0]) & (x <= ex[:, 1]), axis=1)

    def to_dict(self) -> dict:
        t = self.tri
        return {"variant": self.variant, "region": t.region.tolist(), "divisions": t.divisions.tolist(),
                "exclusion": None if t.exclusion is None else t.exclusion.tolist(),
                "values": [float(v) for v in self.values],
                "P": None if self.P is None else self.P.tolist(), "epsilon": float(self.epsilon)}

    @classmethod
    def from_dict(cls, d: dict) -> "StorageCertificate":
        tri = kuhn_triangulate(d["region"], d["divisions"], d.get("exclusion"))
        vals = np.asarray(d["values"], float)
        if vals.shape != (tri.n_vertices,):
            raise AnalysisError("stored vertex values do not match the mesh")
        P = None if d.get("P") is None else np.asarray(d["P"], float)
        return cls(d["variant"], tri, vals, P, float(d.get("epsilon", 0.0)))


def _cpa_value(cert: StorageCertificate, x):
    idx, lam = locate(cert.tri, x)
    return np.einsum("kj,kj->k", lam, cert.values[cert.tri.simplices[idx]]), idx


def evaluate_storage(cert: StorageCertificate, x):
    """Storage value at ``x`` (``(n,)`` or ``(N, n)``).

    Raises
    ------
    MeshError
        Outside the analysis region.
    """
    x = np.asarray(x, float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    out = np.empty(len(X))
    if cert.P is None:
        out[:] = _cpa_value(cert, X)[0]
    else:
        lo, hi = cert.tri.region[:, 0], cert.tri.region[:, 1]
        if np.any(X < lo - 1e-12) or np.any(X > hi + 1e-12):
            raise MeshError("point outside the triangulated region")
        vp = np.einsum("ki,ij,kj->k", X, cert.P, X)
        inside = cert.in_exclusion(X)
        out[inside] = vp[inside]
        rest = np.flatnonzero(~inside)
        if rest.size:
            vc = _cpa_value(cert, X[rest])[0]
            ball = np.linalg.norm(X[rest], axis=1) <= cert.epsilon
            out[rest] = np.where(ball, np.minimum(vp[rest], vc), vc)
    return float(out[0]) if single else out


def storage_gradient(cert: StorageCertificate, x):
    """Gradient of the active storage piece at ``x`` (``(N, n)``)."""
    X = np.atleast_2d(np.asarray(x, float))
    out = np.empty_like(X)
    if cert.P is None:
        idx, _ = locate(cert.tri, X)
        out[:] = cert.gradients[idx]
        return out
    vp = np.einsum("ki,ij,kj->k", X, cert.P, X)
    quad = cert.in_exclusion(X)
    rest = np.flatnonzero(~quad)
    if rest.size:
        vc, idx = _cpa_value(cert, X[rest])
        ball = np.linalg.norm(X[rest], axis=1) <= cert.epsilon
        use_p = ball & (vp[rest] <= vc)
        g = cert.gradients[idx]
        out[rest] = g
        quad[rest[use_p]] = True
    out[quad] = 2.0 * X[quad] @ cert.P
    return out


def export_storage_csv(cert: StorageCertificate, path, points: int = 101):
    """Sample the storage on a regular grid (2-D and lower) or at mesh vertices."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = cert.tri.n
    if n <= 2:
        axes = [np.linspace(a, b, points) for a, b in cert.tri.region]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)
    else:
        X = cert.tri.vertices
    V = evaluate_storage(cert, X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(n)] + ["V"])
        for x, v in zip(X, np.atleast_1d(V)):
            w.writerow([repr(float(a)) for a in x] + [repr(float(v))])
    return path


@dataclass
class AnalysisResult:
    """Outcome of one analysis.

    ``status`` is ``"optimal"`` only when the solve succeeded and, if
    requested, the certificate passed verification.
    """

    status: str
    mode: str
    variant: str
    headline: dict
    Q: np.ndarray | None
    S: np.ndarray | None
    R: np.ndarray | None
    certificate: StorageCertificate | None
    diagnostics: dict
    verification: dict | None = None
    message: str = ""
    timings: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a, float).tolist()
        return {"status": self.status, "mode": self.mode, "variant": self.variant,
                "headline": {k: float(v) for k, v in self.headline.items()},
                "Q": arr(self.Q), "S": arr(self.S), "R": arr(self.R),
                "certificate": None if self.certificate is None else self.certificate.to_dict(),
                "diagnostics": self.diagnostics, "verification": self.verification,
                "message": self.message}

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisResult":
        def arr(a):
            return None if a is None else np.asarray(a, float)
        cert = None if d.get("certificate") is None else StorageCertificate.from_dict(d["certificate"])
        return cls(d["status"], d["mode"], d["variant"], dict(d.get("headline", {})), arr(d.get("Q")),
                   arr(d.get("S")), arr(d.get("R")), cert, dict(d.get("diagnostics", {})),
                   d.get("verification"), d.get("message", ""))


# -- program construction -------------------------------------------------------------------

@dataclass
class _Built:
    program: ConicProgram
    vmap: DecisionVariableMap
    tri: Triangulation
    variant: str
    epsilon: float
    stats: dict


def _ensure_variant(req: AnalysisRequest, variant: str):
    if variant == "no_affine" and req.model.has_affine_terms:
        raise AnalysisError("the no_affine variant requires B = 0 and D = 0")


def _mesh_for(req: AnalysisRequest, variant: str):
    box = req.region_array()
    div = req.divisions_array()
    if variant == "no_affine":
        return kuhn_triangulate(box, div), 0.0
    spacing = (box[:, 1] - box[:, 0]) / div
    w = _exclusion_cells(req, spacing) * spacing
    ex = np.stack([-w, w], axis=1)
    tri = kuhn_triangulate(box, div, ex)
    n = req.model.n
    eps = float(req.epsilon) if req.epsilon is not None else float(2.0 * w.max() * np.sqrt(n))
    corner = float(np.linalg.norm(w))
    if eps < corner:
        raise AnalysisError(f"epsilon {eps} does not cover the excluded block (corner radius {corner})")
    return tri, eps


def _exclusion_cells(req, spacing):
    if req.exclusion_halfwidth is None:
        k = np.full(len(spacing), int(req.exclusion_cells))
    else:
        k = np.maximum(1, np.round(req.exclusion_halfwidth / spacing)).astype(int)
    if np.any(k < 1):
        raise AnalysisError("the excluded block needs at least one cell")
    return k


def _gradient_rows(program, tri, V, l, pinned):
    """``|grad V_i|_1 <= l_i`` as ``2^n`` sign rows per simplex."""
    n = tri.n
    T = cpa_gradient_matrix(tri.X_inv)                      # (K, n, n+1)
    S = sign_patterns(n)                                    # (2^n, n)
    A = np.einsum("sq,kqa->ksa", S, T)                       # (K, 2^n, n+1)
    vv = V[tri.simplices]                                   # (K, n+1)
    if pinned is not None:
        A = np.where((vv < 0)[:, None, :], 0.0, A)
        vv = np.where(vv < 0, l[:, None], vv)
    K, ns = A.shape[0], A.shape[1]
    idx = np.concatenate([np.repeat(vv[:, None, :], ns, axis=1), np.repeat(l[:, None, None], ns, axis=1)],
                         axis=2).reshape(K * ns, n + 2)
    coef = np.concatenate([A, -np.ones((K, ns, 1))], axis=2).reshape(K * ns, n + 2)
    program.add_linear_le(idx, coef, np.zeros(K * ns))


def _vertex_data(tri, V, bt, l):
    """Flatten simplex-vertex pairs into batch inputs."""
    n = tri.n
    K = tri.n_simplices
    T = cpa_gradient_matrix(tri.X_inv)
    vv = V[tri.simplices]
    pinned = vv < 0
    if np.any(pinned):
        T = np.where(pinned[:, None, :], 0.0, T)
        vv = np.where(pinned, 0, vv)
    rep = n + 1
    data = {
        "pts": tri.vertices[tri.simplices].reshape(K * rep, n),
        "T": np.repeat(T, rep, axis=0),
        "vars": np.repeat(vv, rep, axis=0),
        "c": tri.c.reshape(K * rep),
        "beta": np.repeat(bt.beta, rep),
        "rho": np.repeat(bt.rho, rep, axis=0),
        "mu": np.repeat(bt.mu, rep, axis=0),
        "theta": np.repeat(bt.theta, rep),
        "l": np.repeat(l, rep),
        "is_origin": np.zeros(K * rep, bool),
    }
    if tri.contains_origin.any():
        o = np.zeros((K, rep), bool)
        o[tri.contains_origin, 0] = True
        data["is_origin"] = o.reshape(-1)
    return data


def _emit_vertices(program, model, qsr, vmap, data, delta, chunk=20000):
    stats = {"blocks": 0, "rows": 0}
    N = len(data["pts"])
    for drop, sel in (((), ~data["is_origin"]), ((0,), data["is_origin"])):
        rows = np.flatnonzero(sel)
        for s in range(0, rows.size, chunk):
            r = rows[s:s + chunk]
            err = {k: data[k][r] for k in ("c", "beta", "rho", "mu", "theta", "l")}
            err["vmap"] = vmap
            B = vertex_batch(model, qsr, data["pts"][r], data["T"][r], data["vars"][r], err)
            st = B.emit(program, delta, drop_blocks=drop, name="vertex" if not drop else "origin_vertex")
            stats["blocks"] += st["blocks"]
            stats["rows"] += st["rows"]
    stats["vertex_matrices"] = N
    return stats


def build_program(req: AnalysisRequest, variant: str | None = None) -> _Built:
    """Assemble the conic program for ``req`` without solving it."""
    variant = variant or req.resolved_variant()
    _ensure_variant(req, variant)
    model = req.model
    n, m, p = model.n, model.m, model.p
    box = req.region_array()
    model.check_region(box)
    tri, eps = _mesh_for(req, variant)
    bt = triangulation_bounds(model, tri, req.bound_mode)
    prog = ConicProgram()
    qsr = preset_qsr(req.mode, prog, p, m, req.delta, Q=None if req.Q is None else np.asarray(req.Q, float))
    Vn = tri.n_vertices
    V = -np.ones(Vn, dtype=np.int64)
    ov = tri.origin_vertex() if variant == "no_affine" else None
    free = np.ones(Vn, bool)
    if ov is not None:
        free[ov] = False
    V[free] = prog.add_variables(int(free.sum()), "V", lb=0.0)
    l = prog.add_variables(tri.n_simplices, "l", lb=0.0)
    vmap = DecisionVariableMap(V, l, qsr=qsr)
    vmap.add_weight(prog, 1, m)
    vmap.add_weight(prog, 2, p if qsr.has_Q else 0)
    vmap.add_weight(prog, 3, p if qsr.has_Q else 0)
    _gradient_rows(prog, tri, V, l, ov)
    data = _vertex_data(tri, V, bt, l)
    stats = _emit_vertices(prog, model, qsr, vmap, data, req.delta)
    if variant == "with_affine":
        stats.update(_add_origin_ball(prog, req, tri, eps, vmap, qsr))
    stats["n_simplices"] = int(tri.n_simplices)
    stats["n_vertices"] = int(Vn)
    stats["n_vars"] = int(prog.n_vars)
    stats["bounds_certified"] = bool(req.bound_mode == "interval")
    return _Built(prog, vmap, tri, variant, eps, stats)


def _quad_rows(Pidx, X):
    """Index and coefficient rows of ``x^T P x`` in the upper-triangle variables."""
    n = X.shape[1]
    iu = np.triu_indices(n)
    idx = np.broadcast_to(Pidx[iu], (len(X), len(iu[0])))
    w = np.where(iu[0] == iu[1], 1.0, 2.0)
    coef = X[:, iu[0]] * X[:, iu[1]] * w
    return idx, coef


def _add_origin_ball(prog, req, tri, eps, vmap, qsr):
    model = req.model
    n, m, p = model.n, model.m, model.p
    ball = origin_ball_data(model, eps, req.bound_mode)
    Pv = prog.add_variables(n * (n + 1) // 2, "P")
    Pidx = np.zeros((n, n), dtype=np.int64)
    iu = np.triu_indices(n)
    Pidx[iu] = Pv
    Pidx[(iu[1], iu[0])] = Pv
    vmap.P = Pidx
    vmap.lp = int(prog.add_variables(1, "l_p", lb=0.0)[0])
    for z, size in ((4, m), (5, m), (6, m), (7, p), (8, p), (9, p)):
        vmap.add_weight(prog, z, size if (z < 7 or qsr.has_Q) else 0)
    Paff = vmap.P_aff()
    # P >= delta I and P <= l_p I
    prog.add_lmi(LMIBlock(req.delta * np.eye(n), [(v, -c) for v, c in Paff.terms], "P_lower"))
    prog.add_lmi(LMIBlock(np.zeros((n, n)), [(v, c) for v, c in Paff.terms] + [(vmap.lp, -np.eye(n))],
                          "P_upper"))
    Bm = assemble_M_eps(model, qsr, ball, vmap)
    st = Bm.emit(prog, req.delta, name="origin_ball")
    # coupling on the exclusion boundary and inside the ball
    X = tri.vertices
    ex = tri.exclusion
    tol = 1e-9 * float(np.max(tri.spacing))
    in_closed = np.all((X >= ex[:, 0] - tol) & (X <= ex[:, 1] + tol), axis=1)
    on_bdry = in_closed
    near = (np.linalg.norm(X, axis=1) <= eps + tol) & ~in_closed
    qi, qc = _quad_rows(Pidx, X)
    b = np.flatnonzero(on_bdry)
    if b.size:  # x^T P x - V_x <= 0
        prog.add_linear_le(np.concatenate([qi[b], vmap.V[b][:, None]], axis=1),
                           np.concatenate([qc[b], -np.ones((b.size, 1))], axis=1), np.zeros(b.size))
    c = np.flatnonzero(near)
    if c.size:  # V_x - x^T P x <= 0
        prog.add_linear_le(np.concatenate([qi[c], vmap.V[c][:, None]], axis=1),
                           np.concatenate([-qc[c], np.ones((c.size, 1))], axis=1), np.zeros(c.size))
    sph = _add_sphere_coupling(prog, tri, eps, vmap, Paff)
    return {"epsilon": float(eps), "boundary_vertices": int(b.size), "ball_vertices": int(c.size),
            "ball_blocks": int(st["blocks"]), "ball_rows": int(st["rows"]), "sphere_simplices": sph}


def _add_sphere_coupling(prog, tri, eps, vmap, Paff):
    """CPA below ``x^T P x`` on the sphere ``|x| = eps``, per straddling simplex.

    The storage switches from ``min(x^T P x, CPA)`` to CPA on the sphere, so
    continuity needs ``L(x) <= x^T P x`` there for the affine piece
    ``L(x) = a + g^T x`` of every simplex the sphere crosses.  By the
    S-lemma with an equality constraint this holds on the whole sphere iff
    ``x^T P x - L(x) + tau (|x|^2 - eps^2) >= 0`` for all ``x`` and some
    ``tau``, i.e. ``[[P + tau I, -g/2], [-g^T/2, -a - tau eps^2]] >= 0``.
    Vertex constraints alone leave the values of vertices outside the ball
    free and allow an upward jump when a trajectory leaves the ball.
    """
    n = tri.n
    sv = tri.vertices[tri.simplices]                           # (K, n+1, n)
    tol = 1e-9 * float(np.max(tri.spacing))
    far = np.linalg.norm(sv, axis=2).max(axis=1) >= eps - tol
    lo, hi = sv.min(axis=1), sv.max(axis=1)
    near = np.linalg.norm(np.clip(0.0, lo, hi), axis=1) <= eps + tol
    ks = np.flatnonzero(far & near)
    if ks.size == 0:
        return 0
    T = cpa_gradient_matrix(tri.X_inv[ks])                     # (Ks, n, n+1)
    x0 = sv[ks, 0]
    vv = vmap.V[tri.simplices[ks]]
    tau = prog.add_variables(ks.size, "tau")
    Bt = BatchAffine(ks.size, [n, 1])
    # the negated matrix is emitted as <= 0
    Bt.add_aff(0, 0, Paff.map(lambda X: -X))
    Bt.add(0, 0, -np.eye(n)[None], tau, key="tau")
    Bt.add(1, 1, np.full((ks.size, 1, 1), eps * eps), tau, key="tau")
    for a in range(n + 1):
        ta = T[:, :, a]                                        # g = sum_a ta V_a
        ca = float(a == 0) - np.einsum("ki,ki->k", ta, x0)     # a = V_0 - g^T x_0
        Bt.add(0, 1, 0.5 * ta[:, :, None], vv[:, a], key=("V", a))
        Bt.add(1, 1, ca[:, None, None], vv[:, a], key=("V", a))
    Bt.emit(prog, 0.0, name="sphere_coupling")
    return int(ks.size)


# -- solving --------------------------------------------------------------------------------

def _solve_once(req: AnalysisRequest, variant: str) -> AnalysisResult:
    t0 = time.perf_counter()
    built = build_program(req, variant)
    t1 = time.perf_counter()
    sol = solve(built.program, req.solver)
    t2 = time.perf_counter()
    qsr = built.vmap.qsr
    diag = dict(built.stats)
    diag.update({"solver_status": sol.status, "objective": float(sol.objective),
                 "dual_bound": float(sol.dual_bound), "max_block_residual": float(sol.max_block_residual),
                 "max_linear_residual": float(sol.max_linear_residual), "iterations": int(sol.iterations),
                 "delta": float(req.delta), "qsr_reduced": bool(qsr.reduced),
                 "assumption": "trajectories are assumed to remain in the region (forward invariance "
                               "is not computed)"})
    timings = {"assembly_s": t1 - t0, "solve_s": t2 - t1}
    log.info("solve %s: %s in %.1fs (%d vars, %d simplices)", req.mode, sol.status, t2 - t1,
             built.program.n_vars, built.tri.n_simplices)
    if sol.status == "infeasible":
        res = AnalysisResult("infeasible", req.mode, variant, {}, None, None, None, None, diag,
                             message=_infeasible_message(built, variant))
        res.timings = timings
        return res
    if not sol.ok:
        res = AnalysisResult("solver_failure", req.mode, variant, {}, None, None, None, None, diag,
                             message=f"solver returned {sol.status}")
        res.timings = timings
        return res
    y = sol.x
    r = qsr.realize(y)
    vals = np.where(built.vmap.V >= 0, y[np.maximum(built.vmap.V, 0)], 0.0)
    vals = np.maximum(vals, 0.0)
    P = None if built.vmap.P is None else built.vmap.P_value(y)
    cert = StorageCertificate(variant, built.tri, vals, P, built.epsilon)
    Q = r["Q"] if not (qsr.mode == "fixed_qsr" and qsr.Q_fixed is not None) else qsr.Q_fixed
    res = AnalysisResult("optimal", req.mode, variant, r["headline"], Q, r["S"], r["R"], cert, diag)
    res.timings = timings
    if req.verify:
        from .verify import verify_result
        rep = verify_result(req.model, res, samples_per_simplex=req.verify_samples,
                            trials=req.verify_trials, horizon=req.verify_horizon,
                            input_cap=req.input_cap, seed=req.seed)
        res.verification = rep
        if not rep["passed"]:
            res.status = "verification_failed"
            res.message = "certificate failed independent verification"
    return res


def _infeasible_message(built, variant):
    msg = (f"infeasible on a mesh of {built.tri.n_simplices} simplices; refining the mesh "
           f"(more divisions) may make the problem feasible")
    if variant == "with_affine":
        msg += f"; a smaller origin-ball radius than epsilon={built.epsilon:g} may also help"
    return msg


def analyze(req: AnalysisRequest) -> AnalysisResult:
    """Run the requested variant with up to ``refine_cap`` refinements."""
    variant = req.resolved_variant()
    _ensure_variant(req, variant)
    cur = req
    res = _solve_once(cur, variant)
    for _ in range(req.refine_cap):
        if res.status != "infeasible":
            break
        div = tuple(int(2 * d) for d in cur.divisions_array())
        cur = _replace(cur, divisions=div)
        log.info("refining to %s divisions", div)
        res = _solve_once(cur, variant)
    return res


def _replace(req, **kw):
    from dataclasses import replace
    return replace(req, **kw)


def analyze_no_affine(req: AnalysisRequest) -> AnalysisResult:
    """CPA storage on the whole box; requires ``B = D = 0``."""
    return analyze(_replace(req, variant="no_affine"))


def analyze_with_affine(req: AnalysisRequest) -> AnalysisResult:
    """Combined quadratic and CPA storage with the origin block excluded."""
    return analyze(_replace(req, variant="with_affine"))
