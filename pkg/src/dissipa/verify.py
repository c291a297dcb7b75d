"""Solver-free checks of certificates and of the error bounds they rely on.

* :func:`check_hji_sampling` -- the dissipation matrix at random points of
  every simplex (and of the origin ball) with the certificate's gradient.
* :func:`simulate_dissipation` -- Monte Carlo trajectories with random
  piecewise-constant inputs; checks ``V(x(t)) - V(x0) <= int w dt``.
* :func:`probe_theorem3`, :func:`probe_theorem4`, :func:`probe_lemmas` --
  randomized soundness tests of the simplex and origin-ball LMI bounds and
  of the interpolation-error lemmas.
* :func:`conic_oracle_1d` -- the analytical cone for the scalar cubic system
  with a quadratic storage.

Margins follow one sign convention: negative or zero means satisfied.
Everything is deterministic for a fixed seed.  Simulation is evidence, not
proof: integration error is not bounded.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .expr import evaluate, parse_expression, second_derivative_sup
from .lmi import assemble_theorem3_bound, assemble_theorem4_bound
from .mesh import MeshError, c_max_squared, c_origin
from .model import DynamicsModel

__all__ = ["SupplyRate", "VerificationReport", "AnalyticStorage", "IntegrationError", "hji_matrices",
           "check_hji_sampling", "simulate_dissipation", "probe_theorem3", "probe_theorem4",
           "probe_lemmas", "conic_oracle_1d", "verify_result", "random_expression"]

log = logging.getLogger(__name__)

HJI_TOL = 1e-7


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SupplyRate:
    """``w(u, y) = y^T Q y + 2 y^T S u + u^T R u``."""

    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, float))
        R = np.atleast_2d(np.asarray(self.R, float))
        S = np.atleast_2d(np.asarray(self.S, float)).reshape(Q.shape[0], R.shape[0])
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "R", 0.5 * (R + R.T))
        object.__setattr__(self, "S", S)
        if Q.size and np.max(np.linalg.eigvalsh(self.Q)) > 1e-9 * max(1.0, np.abs(Q).max()):
            raise ValueError("Q must be negative semidefinite")

    @classmethod
    def from_result(cls, result) -> "SupplyRate":
        return cls(result.Q, result.S, result.R)

    @classmethod
    def l2_gain(cls, gamma, p=1, m=1):
        return cls(-np.eye(p), np.zeros((p, m)), gamma ** 2 * np.eye(m))

    def rate(self, u, y):
        return (np.einsum("...i,ij,...j->...", y, self.Q, y) + 2 * np.einsum("...i,ij,...j->...", y, self.S, u)
                + np.einsum("...i,ij,...j->...", u, self.R, u))


@dataclass
class VerificationReport:
    """Outcome of one check.  ``worst_margin <= tol`` means satisfied."""

    check: str
    passed: bool
    worst_margin: float
    tol: float
    seed: int
    samples: int = 0
    violations: int = 0
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        return _jsonable(d)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


@dataclass
class AnalyticStorage:
    """Closed-form storage for checks that do not come from a solve.

    Parameters
    ----------
    value : callable
        ``(N, n) -> (N,)``.
    region : (n, 2) array
    gradient : callable, optional
        ``(N, n) -> (N, n)``.
    step : float
        Integration step used by :func:`simulate_dissipation`.
    """

    value: Callable
    region: np.ndarray
    gradient: Callable | None = None
    step: float = 1e-3

    def __post_init__(self):
        self.region = np.atleast_2d(np.asarray(self.region, float))


# -- the dissipation matrix ------------------------------------------------------------------

def hji_matrices(model: DynamicsModel, supply: SupplyRate, x, grad):
    """Dissipation matrices at points ``x`` for storage gradients ``grad``.

    With ``Q`` invertible the layout is::

        [[gV^T f,  gV^T Gb / 2 - h^T S,   h^T    ],
         [  *,     -R - S^T Jb - Jb^T S,  Jb^T   ],
         [  *,          *,                Q^{-1} ]]

    With ``Q = 0`` the last block row is dropped.  A singular nonzero ``Q``
    uses the equivalent two-block form with ``-h^T Q h``, ``-h^T Q Jb`` and
    ``-Jb^T Q Jb`` folded in.  Negative semidefinite everywhere means the
    dissipation inequality holds pointwise.
    """
    X = np.atleast_2d(np.asarray(x, float))
    g = np.atleast_2d(np.asarray(grad, float))
    N = len(X)
    m, p = model.m, model.p
    f = model.f_at(X)
    h = model.h_at(X)
    Gb = np.broadcast_to(model.Gbar_at(X), (N, model.n, m))
    Jb = np.broadcast_to(model.Jbar_at(X), (N, p, m))
    Q, S, R = supply.Q, supply.S, supply.R
    q_zero = not np.any(Q)
    q_inv = None
    if not q_zero:
        w = np.linalg.eigvalsh(Q)
        if np.min(np.abs(w)) > 1e-12 * np.max(np.abs(w)):
            q_inv = np.linalg.inv(Q)
    s = 1 + m + (p if q_inv is not None else 0)
    M = np.zeros((N, s, s))
    M[:, 0, 0] = np.einsum("ki,ki->k", g, f)
    top = 0.5 * np.einsum("ki,kij->kj", g, Gb) - h @ S
    SJ = np.einsum("pa,kpb->kab", S, Jb)
    mid = -R[None] - SJ - np.swapaxes(SJ, 1, 2)
    if q_inv is None and not q_zero:
        M[:, 0, 0] -= np.einsum("ki,ij,kj->k", h, Q, h)
        top = top - np.einsum("ki,ij,kjb->kb", h, Q, Jb)
        mid = mid - np.einsum("kpa,pq,kqb->kab", Jb, Q, Jb)
    M[:, 0, 1:1 + m] = top
    M[:, 1:1 + m, 0] = top
    M[:, 1:1 + m, 1:1 + m] = mid
    if q_inv is not None:
        M[:, 0, 1 + m:] = h
        M[:, 1 + m:, 0] = h
        M[:, 1:1 + m, 1 + m:] = np.swapaxes(Jb, 1, 2)
        M[:, 1 + m:, 1:1 + m] = Jb
        M[:, 1 + m:, 1 + m:] = q_inv
    return M


def _max_eig(M):
    return np.linalg.eigvalsh(M)[:, -1]


# -- sampled HJI check -----------------------------------------------------------------------

def _dirichlet(rng, K, N, n):
    """``(K, N, n+1)`` uniform barycentric weights, vertices first."""
    e = rng.exponential(size=(K, N, n + 1))
    lam = e / e.sum(axis=-1, keepdims=True)
    eye = np.broadcast_to(np.eye(n + 1), (K, n + 1, n + 1))
    return np.concatenate([eye, lam], axis=1)


def check_hji_sampling(model: DynamicsModel, cert, supply: SupplyRate, samples_per_simplex: int = 200,
                       seed: int = 0, tol: float = HJI_TOL, chunk: int = 400_000,
                       ball_samples: int | None = None) -> VerificationReport:
    """Largest eigenvalue of the dissipation matrix over random points.

    Every simplex gets its vertices plus ``samples_per_simplex`` uniform
    points, checked with the simplex's CPA gradient.  When the certificate
    has a quadratic part, uniform points of the origin ball and of
    ``8`` spherical shells are checked with the gradient ``2 P x``.

    Parameters
    ----------
    cert : StorageCertificate or AnalyticStorage
        An :class:`AnalyticStorage` needs ``gradient``; it is sampled
        uniformly on its region (``samples_per_simplex * 100`` points).
    """
    rng = np.random.default_rng(seed)
    worst = -np.inf
    details = {}
    total = 0
    if isinstance(cert, AnalyticStorage):
        if cert.gradient is None:
            raise ValueError("analytic storage needs a gradient for the HJI check")
        lo, hi = cert.region[:, 0], cert.region[:, 1]
        X = lo + rng.random((samples_per_simplex * 100, model.n)) * (hi - lo)
        ev = _max_eig(hji_matrices(model, supply, X, cert.gradient(X)))
        k = int(np.argmax(ev))
        worst = float(ev[k])
        details["worst_point"] = X[k].tolist()
        total = len(X)
    else:
        tri = cert.tri
        K, n = tri.n_simplices, tri.n
        grads = cert.gradients
        per = np.full(K, -np.inf)
        sv = tri.simplex_vertices
        step = max(1, chunk // (samples_per_simplex + n + 1))
        for s in range(0, K, step):
            sl = slice(s, min(K, s + step))
            lam = _dirichlet(rng, sl.stop - sl.start, samples_per_simplex, n)
            X = np.einsum("kaj,kji->kai", lam, sv[sl])
            kk, na = X.shape[0], X.shape[1]
            G = np.repeat(grads[sl], na, axis=0)
            ev = _max_eig(hji_matrices(model, supply, X.reshape(kk * na, n), G)).reshape(kk, na)
            per[sl] = ev.max(axis=1)
            total += ev.size
        worst = float(per.max())
        order = np.argsort(per)[::-1][:5]
        details["worst_simplices"] = [{"simplex": int(i), "max_eig": float(per[i]),
                                       "vertices": sv[i].tolist()} for i in order]
        details["cpa_max_eig"] = worst
        if getattr(cert, "P", None) is not None:
            nb = ball_samples or samples_per_simplex * 50
            Xb = _ball_points(rng, n, cert.epsilon, nb)
            evb = _max_eig(hji_matrices(model, supply, Xb, 2.0 * Xb @ cert.P))
            details["ball_max_eig"] = float(evb.max())
            details["ball_samples"] = len(Xb)
            total += len(Xb)
            worst = max(worst, float(evb.max()))
    passed = bool(worst <= tol)
    return VerificationReport("hji_sampling", passed, worst, tol, seed, total, int(not passed), details)


def _ball_points(rng, n, eps, N, shells: int = 8):
    d = rng.standard_normal((N, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = eps * rng.random(N) ** (1.0 / n)
    pts = d * r[:, None]
    k = N // 4
    radii = eps * np.linspace(1.0 / shells, 1.0, shells)
    pts[:k] = d[:k] * radii[np.arange(k) % shells][:, None]
    return pts


# -- trajectory Monte Carlo ------------------------------------------------------------------

def _storage_funcs(storage):
    if isinstance(storage, AnalyticStorage):
        return storage.value, storage.region, float(storage.step)
    from .analysis import evaluate_storage
    tri = storage.tri
    return (lambda X: np.atleast_1d(evaluate_storage(storage, X))), tri.region, float(tri.spacing.min() / 10.0)


def simulate_dissipation(model: DynamicsModel, storage, supply: SupplyRate, trials: int = 100,
                         horizon: float = 5.0, input_cap: float = 1.0, segments: int = 25, seed: int = 0,
                         tol: float = 1e-6, step: float | None = None, max_steps: int = 2_000_000,
                         x0=None) -> VerificationReport:
    """Count violations of ``V(x(t)) - V(x0) <= int_0^t w dt + tol``.

    Initial states are uniform in the region.  Inputs are piecewise constant
    on ``segments`` equal intervals with entries uniform in
    ``[-input_cap, input_cap]``.  Integration is fixed-step RK4 on the state
    augmented with the supply integral, with step ``min spacing / 10`` for
    mesh certificates.  The inequality is checked at every segment end.  A
    trajectory that leaves the region is stopped at its exit point, found by
    bisection on the last step, and checked there.
    """
    rng = np.random.default_rng(seed)
    Vf, region, h0 = _storage_funcs(storage)
    n, m = model.n, model.m
    lo, hi = region[:, 0], region[:, 1]
    h = float(step) if step is not None else h0
    seg_steps = max(1, int(np.ceil(horizon / segments / h)))
    h = horizon / segments / seg_steps
    if segments * seg_steps > max_steps:
        raise IntegrationError(f"{segments * seg_steps} steps exceed max_steps={max_steps}")
    X = lo + rng.random((trials, n)) * (hi - lo) if x0 is None else np.atleast_2d(np.asarray(x0, float)).copy()
    trials = len(X)
    U = rng.uniform(-input_cap, input_cap, size=(segments, trials, m))
    V0 = Vf(X)
    W = np.zeros(trials)
    active = np.ones(trials, bool)
    margin = np.full(trials, -np.inf)
    exit_time = np.full(trials, np.nan)

    def rhs(x, u):
        dx = model.rhs(x, u)
        w = supply.rate(u, model.output(x, u))
        return dx, w

    def rk4(x, u, dt):
        k1, w1 = rhs(x, u)
        k2, w2 = rhs(x + 0.5 * dt[:, None] * k1, u)
        k3, w3 = rhs(x + 0.5 * dt[:, None] * k2, u)
        k4, w4 = rhs(x + dt[:, None] * k3, u)
        return (x + dt[:, None] / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4),
                dt / 6.0 * (w1 + 2 * w2 + 2 * w3 + w4))

    def inside(x):
        return np.all((x >= lo) & (x <= hi), axis=1)

    t = 0.0
    for sgi in range(segments):
        for _ in range(seg_steps):
            a = np.flatnonzero(active)
            if a.size == 0:
                break
            xa, ua = X[a], U[sgi, a]
            dt = np.full(a.size, h)
            xn, dw = rk4(xa, ua, dt)
            if not np.all(np.isfinite(xn)):
                raise IntegrationError("non-finite state; the model may be stiff at this step size")
            ok = inside(xn)
            X[a[ok]] = xn[ok]
            W[a[ok]] += dw[ok]
            out = a[~ok]
            if out.size:
                xe, we, te = _bisect_exit(rk4, inside, X[out], U[sgi, out], h)
                X[out] = xe
                W[out] += we
                margin[out] = np.maximum(margin[out], Vf(xe) - V0[out] - W[out])
                exit_time[out] = t + te
                active[out] = False
            t += h
        a = np.flatnonzero(active)
        if a.size:
            margin[a] = np.maximum(margin[a], Vf(X[a]) - V0[a] - W[a])
    worst = float(np.max(margin))
    viol = int(np.sum(margin > tol))
    details = {"horizon": horizon, "step": h, "segments": segments, "input_cap": input_cap,
               "exited": int(np.sum(~np.isnan(exit_time))), "worst_trial": int(np.argmax(margin))}
    return VerificationReport("simulation", viol == 0, worst, tol, seed, trials, viol, details)


def _bisect_exit(rk4, inside, x, u, h, iters: int = 40):
    """Largest fraction of the step ``h`` that keeps each state in the region."""
    lo = np.zeros(len(x))
    hi = np.full(len(x), h)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        xm, _ = rk4(x, u, mid)
        ok = inside(xm)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    xe, we = rk4(x, u, lo)
    return xe, we, lo


# -- random test functions -------------------------------------------------------------------

def random_expression(rng, n: int, degree: int = 4, terms: int = 4, sin_terms: int = 1, scale: float = 1.0,
                      zero_at_origin: bool = False, min_degree: int = 0) -> str:
    """Random polynomial of total degree ``<= degree`` plus ``sin`` terms, as text."""
    parts = []
    lo_deg = max(min_degree, 1 if zero_at_origin else 0)
    for _ in range(terms):
        d = int(rng.integers(lo_deg, degree + 1))
        pw = np.zeros(n, int)
        for _ in range(d):
            pw[rng.integers(n)] += 1
        c = float(scale * rng.uniform(-1.0, 1.0))
        mono = "*".join(f"x{i + 1}^{k}" if k > 1 else f"x{i + 1}" for i, k in enumerate(pw) if k) or "1"
        parts.append(f"({c!r})*{mono}")
    for _ in range(sin_terms):
        w = rng.uniform(-2.0, 2.0, n)
        arg = " + ".join(f"({float(wi)!r})*x{i + 1}" for i, wi in enumerate(w))
        c = float(scale * rng.uniform(-1.0, 1.0))
        parts.append(f"({c!r})*sin({arg})")
    return " + ".join(parts)


def _random_simplex(rng, n, origin: bool, size: float):
    while True:
        base = np.zeros(n) if origin else rng.uniform(-1.0, 1.0, n)
        V = base + size * rng.uniform(-1.0, 1.0, (n + 1, n))
        if origin:
            V[0] = 0.0
        A = V[1:] - V[0]
        if abs(np.linalg.det(A)) > 1e-3 * size ** n:
            return V


def _dirichlet_points(rng, V, N):
    e = rng.exponential(size=(N, V.shape[0]))
    lam = e / e.sum(axis=1, keepdims=True)
    return lam, lam @ V


# -- simplex probe: vertex LMIs imply the LMI on the simplex --------------------------------------

def probe_theorem3(trials: int = 1000, seed: int = 0, points: int = 500, tol: float = 1e-8,
                   max_dim: int = 3, max_m: int = 2, mode: str = "interval") -> VerificationReport:
    """Randomized soundness test of the simplex LMI bound.

    Each trial draws a simplex (every fourth one has the origin as a vertex),
    ``phi`` and ``zeta`` (polynomials of degree ``<= 4`` plus ``sin`` terms)
    and weights ``Pi`` in ``(0.6, 5)``.  ``phi`` is shifted down by the
    smallest constant making every vertex matrix ``M + E`` negative
    semidefinite; then ``M(x) = [[phi, zeta^T], [zeta, -I]]`` must have
    largest eigenvalue ``<= tol`` at ``points`` random interior points.
    """
    rng = np.random.default_rng(seed)
    worst, fails, checked, origin_cases = -np.inf, 0, 0, 0
    failures = []
    for t in range(trials):
        n = int(rng.integers(1, max_dim + 1))
        m = int(rng.integers(1, max_m + 1))
        origin = t % 4 == 3
        V = _random_simplex(rng, n, origin, float(rng.uniform(0.05, 0.6)))
        phi_s = random_expression(rng, n, scale=rng.uniform(0.2, 3.0))
        zeta_s = [random_expression(rng, n, scale=rng.uniform(0.2, 2.0), zero_at_origin=origin) for _ in range(m)]
        phi = parse_expression(phi_s, n)
        zeta = [parse_expression(z, n) for z in zeta_s]
        Pi = rng.uniform(0.6, 5.0, m)
        M, E, Vr = assemble_theorem3_bound(phi, zeta, V, Pi, mode)
        shift = _min_shift(M + E)
        if shift is None:
            continue
        checked += 1
        origin_cases += origin
        _, X = _dirichlet_points(rng, Vr, points)
        ph = evaluate(phi, X) - shift
        zv = np.stack([evaluate(z, X) for z in zeta], axis=1)
        Mi = np.zeros((points, 1 + m, 1 + m))
        Mi[:, 0, 0] = ph
        Mi[:, 0, 1:] = zv
        Mi[:, 1:, 0] = zv
        Mi[:, 1:, 1:] = -np.eye(m)
        ev = float(_max_eig(Mi).max())
        worst = max(worst, ev)
        if ev > tol:
            fails += 1
            failures.append({"trial": t, "phi": phi_s, "zeta": zeta_s, "vertices": Vr.tolist(), "max_eig": ev})
    return VerificationReport("theorem3", fails == 0, worst, tol, seed, checked, fails,
                              {"trials": trials, "origin_simplices": origin_cases, "failures": failures[:5]})


def _min_shift(A, iters: int = 100):
    """Smallest ``s`` with ``max_j lambda_max(A_j - s e0 e0^T) <= 0``, or None."""
    if np.max(np.linalg.eigvalsh(A[:, 1:, 1:])[:, -1]) >= 0:
        return None

    def worst(s):
        B = A.copy()
        B[:, 0, 0] -= s
        return np.max(np.linalg.eigvalsh(B)[:, -1])
    lo, hi = -1.0, 1.0
    while worst(lo) <= 0:
        lo *= 2
        if lo < -1e12:
            return lo
    while worst(hi) > 0:
        hi *= 2
        if hi > 1e12:
            return None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if worst(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return hi


# -- origin-ball probe: the origin-ball matrix bounds the remainder --------------------------------

def _ball_grid(n, eps, target=10_000):
    frac = {1: 1.0, 2: np.pi / 4, 3: np.pi / 6}.get(n, 0.5 ** n)
    k = int(np.ceil((target / frac) ** (1.0 / n)))
    while True:
        ax = np.linspace(-eps, eps, k)
        X = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), -1).reshape(-1, n)
        X = X[np.linalg.norm(X, axis=1) <= eps]
        if len(X) >= target:
            return X
        k += 1


def probe_theorem4(trials: int = 200, seed: int = 0, grid_points: int = 10_000, tol: float = 1e-8,
                   max_dim: int = 3, max_m: int = 2, mode: str = "interval") -> VerificationReport:
    """Randomized soundness test of the origin-ball matrix.

    ``theta`` and ``zeta`` vanish at the origin; ``theta`` has a stable
    linear part.  ``Pi = pi I`` is searched on a log grid.  Whenever the
    matrix is negative semidefinite for some grid value,
    ``zeta^T zeta + x^T theta(x) <= tol`` must hold on a grid of at least
    ``grid_points`` points of the ball.
    """
    rng = np.random.default_rng(seed)
    grid = np.logspace(-0.25, 2.0, 40)
    worst, fails, feasible = -np.inf, 0, 0
    failures = []
    for t in range(trials):
        n = int(rng.integers(1, max_dim + 1))
        m = int(rng.integers(1, max_m + 1))
        eps = float(rng.uniform(0.02, 0.4))
        a = rng.uniform(0.5, 3.0)
        A = -a * np.eye(n) + 0.3 * a * rng.uniform(-1, 1, (n, n))
        C = rng.uniform(-1, 1, (m, n)) * np.sqrt(a) * 0.7
        th_s = []
        for i in range(n):
            lin = " + ".join(f"({float(A[i, j])!r})*x{j + 1}" for j in range(n))
            th_s.append(lin + " + " + random_expression(rng, n, degree=3, terms=2, sin_terms=0,
                                                        scale=rng.uniform(0.1, 2.0), min_degree=2))
        ze_s = []
        for k in range(m):
            lin = " + ".join(f"({float(C[k, j])!r})*x{j + 1}" for j in range(n))
            nl = random_expression(rng, n, degree=3, terms=1, sin_terms=1, scale=rng.uniform(0.1, 1.0),
                                   min_degree=2)
            ze_s.append(f"{lin} + {nl}")
        theta = [parse_expression(s, n) for s in th_s]
        zeta = [parse_expression(s, n) for s in ze_s]
        ok_pi = None
        for pi in grid:
            Me = assemble_theorem4_bound(theta, zeta, eps, np.full(m, pi), mode)
            if np.linalg.eigvalsh(Me)[-1] <= 0:
                ok_pi = float(pi)
                break
        if ok_pi is None:
            continue
        feasible += 1
        X = _ball_grid(n, eps, grid_points)
        zv = np.stack([evaluate(z, X) for z in zeta], axis=1)
        tv = np.stack([evaluate(th, X) for th in theta], axis=1)
        val = np.sum(zv * zv, axis=1) + np.sum(X * tv, axis=1)
        w = float(val.max())
        worst = max(worst, w)
        if w > tol:
            fails += 1
            failures.append({"trial": t, "theta": th_s, "zeta": ze_s, "epsilon": eps, "pi": ok_pi, "max": w})
    return VerificationReport("theorem4", fails == 0, worst, tol, seed, feasible, fails,
                              {"trials": trials, "feasible": feasible, "failures": failures[:5]})


# -- interpolation-error lemmas ------------------------------------------------------------------

def probe_lemmas(trials: int = 500, seed: int = 0, points: int = 2000, max_dim: int = 3, max_m: int = 3,
                 mode: str = "interval") -> VerificationReport:
    """Check that the interpolation-error bounds dominate the true errors.

    For a random vector function ``zeta`` and simplex, at random points
    with weights ``lambda``:

    * ``|e|_inf <= n/2 max_k mu_k sum_j lambda_j c_j`` and
      ``|e|_2 <= n/2 sum_k mu_k sum_j lambda_j c_j`` with
      ``c_j = max_nu |x_j - x_nu|^2`` (expansion about an interior point);
    * ``|e|_inf <= n/2 beta sum_j lambda_j cbar_j`` with
      ``cbar_j = r_j (max_k r_k + r_j)``, ``r_j = |x_j - x_0|`` (expansion
      about the vertex ``x_0``; every other simplex has ``x_0 = 0``),

    where ``e = zeta(x) - sum_j lambda_j zeta(x_j)``.  The worst margin is
    the largest ``error - bound``.
    """
    rng = np.random.default_rng(seed)
    worst = -np.inf
    fails = 0
    failures = []
    ratio = 0.0
    for t in range(trials):
        n = int(rng.integers(1, max_dim + 1))
        m = int(rng.integers(1, max_m + 1))
        V = _random_simplex(rng, n, t % 2 == 1, float(rng.uniform(0.05, 0.8)))
        texts = [random_expression(rng, n, scale=rng.uniform(0.2, 3.0)) for _ in range(m)]
        zeta = [parse_expression(s, n) for s in texts]
        box = np.stack([V.min(axis=0), V.max(axis=0)], axis=1)
        mu = np.array([second_derivative_sup(z, box, n=n, mode=mode) for z in zeta])
        lam, X = _dirichlet_points(rng, V, points)
        zx = np.stack([evaluate(z, X) for z in zeta], axis=1)
        zv = np.stack([evaluate(z, V) for z in zeta], axis=1)
        e = zx - lam @ zv
        c = c_max_squared(V)
        cb = c_origin(V)
        b_inf = 0.5 * n * mu.max() * (lam @ c)
        b_two = 0.5 * n * mu.sum() * (lam @ c)
        b_old = 0.5 * n * mu.max() * (lam @ cb)
        gaps = np.stack([np.abs(e).max(axis=1) - b_inf, np.linalg.norm(e, axis=1) - b_two,
                         np.abs(e).max(axis=1) - b_old])
        g = float(gaps.max())
        worst = max(worst, g)
        den = float(np.max(b_inf))
        if den > 0:
            ratio = max(ratio, float(np.abs(e).max() / den))
        if g > 1e-12:
            fails += 1
            failures.append({"trial": t, "zeta": texts, "vertices": V.tolist(), "gap": g})
    return VerificationReport("interpolation_lemmas", fails == 0, worst, 1e-12, seed, trials, fails,
                              {"max_error_to_bound_ratio": ratio, "failures": failures[:5]})


# -- analytical cone for the scalar cubic system ----------------------------------------------

def _conic_lmi_eig(P, a, b, k2, B, C, D):
    """Largest eigenvalue of the 2x2 cone condition for quadratic storage ``P x^2 / 2``."""
    s = 0.5 * (a + b)
    m11 = -k2 * P + C * C
    m12 = 0.5 * P * B + C * D - C * s
    m22 = a * b + D * D - 2 * s * D
    return 0.5 * (m11 + m22) + np.sqrt(0.25 * (m11 - m22) ** 2 + m12 ** 2)


def _best_P(a, b, k2, B, C, D, p_lo=1e-9, p_hi=1e6, iters=120):
    """Golden-section search on ``log P`` (the eigenvalue is convex in ``P``), batched."""
    g = (np.sqrt(5.0) - 1.0) / 2.0
    lo = np.full(np.shape(a), np.log(p_lo))
    hi = np.full(np.shape(a), np.log(p_hi))
    x1 = hi - g * (hi - lo)
    x2 = lo + g * (hi - lo)
    f1 = _conic_lmi_eig(np.exp(x1), a, b, k2, B, C, D)
    f2 = _conic_lmi_eig(np.exp(x2), a, b, k2, B, C, D)
    for _ in range(iters):
        left = f1 <= f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        nx1 = hi - g * (hi - lo)
        nx2 = lo + g * (hi - lo)
        x1, x2 = np.where(left, nx1, x2), np.where(left, x1, nx2)
        f1 = _conic_lmi_eig(np.exp(x1), a, b, k2, B, C, D)
        f2 = _conic_lmi_eig(np.exp(x2), a, b, k2, B, C, D)
    x = 0.5 * (lo + hi)
    return np.exp(x), _conic_lmi_eig(np.exp(x), a, b, k2, B, C, D)


def conic_oracle_1d(k1: float = 1.0, k2: float = 2.0, B: float = 1.0, C: float = 1.0, D: float = 0.0,
                    a_range=(-2.0, 0.0), b_range=(0.0, 2.0), grid: int = 81, levels: int = 8,
                    tol: float = 1e-10):
    """Tightest cone ``(a, b)`` certified by a quadratic storage on ``[-1, 1]``.

    For ``x' = k1 x^3 - (k1 + k2) x + B u``, ``y = C x + D u`` and storage
    ``P x^2 / 2`` the cubic term can be dropped on ``[-1, 1]``
    (``x^4 <= x^2``), leaving the ``2 x 2`` condition::

        [[-k2 P + C^2,  P B / 2 + C D - C (a + b) / 2],
         [    *,        a b + D^2 - (a + b) D        ]]  <= 0.

    ``(a, b)`` is swept over a grid; each pair is feasible when the
    smallest largest-eigenvalue over ``P > 0`` is ``<= tol``.  The
    narrowest feasible cone (smallest ``b - a``, then smallest ``|a|``) is
    kept and the grid is zoomed around it ``levels`` times.

    Returns
    -------
    a, b : float

    Raises
    ------
    ValueError
        If ``k1`` or ``k2`` is not positive, or no grid point is feasible.
    """
    if k1 <= 0 or k2 <= 0:
        raise ValueError("k1 and k2 must be positive")
    alo, ahi = map(float, a_range)
    blo, bhi = map(float, b_range)
    best = None
    for _ in range(levels):
        A, Bg = np.meshgrid(np.linspace(alo, ahi, grid), np.linspace(blo, bhi, grid), indexing="ij")
        A, Bg = A.ravel(), Bg.ravel()
        keep = A <= Bg
        A, Bg = A[keep], Bg[keep]
        _, ev = _best_P(A, Bg, k2, B, C, D)
        feas = ev <= tol
        if not np.any(feas):
            if best is None:
                raise ValueError("no feasible cone on the search grid")
            break
        Af, Bf = A[feas], Bg[feas]
        order = np.lexsort((np.abs(Af), Bf - Af))
        cand = (float(Af[order[0]]), float(Bf[order[0]]))
        if best is None or (cand[1] - cand[0], abs(cand[0])) <= (best[1] - best[0], abs(best[0])):
            best = cand
        da = (ahi - alo) / (grid - 1) * 2
        db = (bhi - blo) / (grid - 1) * 2
        alo, ahi = best[0] - da, min(best[0] + da, float(a_range[1]))
        blo, bhi = max(best[1] - db, float(b_range[0])), best[1] + db
    return best


# -- bundle ------------------------------------------------------------------------------------

def verify_result(model: DynamicsModel, result, samples_per_simplex: int = 200, trials: int = 100,
                  horizon: float = 5.0, input_cap: float = 1.0, seed: int = 0, tol_hji: float = HJI_TOL,
                  tol_sim: float = 1e-6) -> dict:
    """Run the sampled HJI check and the trajectory check on a result."""
    cert = result.certificate
    if cert is None:
        return {"passed": False, "reason": "no certificate"}
    supply = SupplyRate.from_result(result)
    hji = check_hji_sampling(model, cert, supply, samples_per_simplex, seed, tol_hji)
    try:
        sim = simulate_dissipation(model, cert, supply, trials, horizon, input_cap, seed=seed, tol=tol_sim)
    except (IntegrationError, MeshError) as exc:
        sim = VerificationReport("simulation", False, float("inf"), tol_sim, seed, 0, 0, {"error": str(exc)})
    log.info("verification: hji max eig %.3g, simulation worst margin %.3g (%d violations)",
             hji.worst_margin, sim.worst_margin, sim.violations)
    return {"passed": bool(hji.passed and sim.passed), "seed": int(seed), "hji": hji.to_dict(),
            "simulation": sim.to_dict()}
