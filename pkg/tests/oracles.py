"""Solver-independent oracles shared by the unit and acceptance tests."""
import numpy as np

from dissipa.sdp import ConicProgram, LMIBlock


def random_sdp(rng, k=None, family=None):
    """Random program ``min c.x`` s.t. ``-r_b I + sum x_j A_bj <= 0`` and ``|x| <= 1``.

    ``x = 0`` is strictly feasible.  The family is drawn at random when not
    given.  The ``"curved"`` family adds the
    norm-ball block ``|x|_2 <= rho`` (``rho < 1``, written as a
    ``(k+1) x (k+1)`` LMI) and uses blocks of size 2 or 3, so the feasible
    set is strictly convex and the box bounds are inactive.  The
    ``"polyhedral"`` family allows 1x1 blocks (linear rows) and active box
    bounds, which produces degenerate, nearly flat optimal faces.
    Returns the program and its raw data.
    """
    k = int(rng.integers(1, 6)) if k is None else k
    family = family or ("curved" if rng.random() < 0.5 else "polyhedral")
    blocks = []
    if family == "curved":
        rho = rng.uniform(0.5, 0.95)
        A = np.zeros((k, k + 1, k + 1))
        for j in range(k):
            A[j, 0, j + 1] = A[j, j + 1, 0] = -1.0
        blocks.append((-rho * np.eye(k + 1), A))
        sizes = rng.integers(2, 4, int(rng.integers(1, 3)))
    else:
        sizes = rng.integers(1, 4, int(rng.integers(1, 4)))
    for s in sizes:
        r = rng.uniform(0.3, 1.5)
        A = rng.standard_normal((k, s, s))
        A = 0.5 * (A + np.swapaxes(A, 1, 2))
        blocks.append((-r * np.eye(s), A))
    c = rng.standard_normal(k)
    p = ConicProgram()
    v = p.add_variables(k, "x", lb=-1.0, ub=1.0)
    p.set_objective(c)
    for C, A in blocks:
        p.add_lmi(LMIBlock(C, [(int(v[j]), A[j]) for j in range(k)]))
    return p, {"c": c, "blocks": blocks, "lo": -np.ones(k), "hi": np.ones(k)}


def _violation(data, X):
    """Sum over blocks of the positive part of the largest eigenvalue."""
    v = np.zeros(len(X))
    for C, A in data["blocks"]:
        F = C[None] + np.einsum("nk,kij->nij", X, A)
        v += np.maximum(np.linalg.eigvalsh(F)[:, -1], 0.0)
    return v


def _grid_stage(data, points, tol):
    """Zooming grid search over feasible grid points; returns (value, point)."""
    c = data["c"]
    k = len(c)
    g = points or {1: 201, 2: 41, 3: 15, 4: 9, 5: 7}[k]
    blo, bhi = data["lo"], data["hi"]
    center, half = 0.5 * (blo + bhi), 0.5 * (bhi - blo)
    best_x, best = None, np.inf
    while np.max(2 * half / (g - 1)) >= tol:
        lo = np.clip(center - half, blo, bhi - 2 * half)
        axes = [np.linspace(lo[i], lo[i] + 2 * half[i], g) for i in range(k)]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, k)
        ok = _violation(data, X) <= 0.0
        if np.any(ok):
            vals = X[ok] @ c
            j = int(np.argmin(vals))
            if vals[j] < best:
                best, best_x = float(vals[j]), X[ok][j]
        if best_x is None:
            break
        center, half = best_x, half * 0.5
    return best, best_x


def _cut(data, x):
    """Subgradient of a violated constraint at ``x``, or None when feasible."""
    lo, hi = data["lo"], data["hi"]
    j = int(np.argmax(np.maximum(lo - x, x - hi)))
    if x[j] > hi[j]:
        return np.eye(len(x))[j]
    if x[j] < lo[j]:
        return -np.eye(len(x))[j]
    worst, a = 0.0, None
    for C, A in data["blocks"]:
        w, V = np.linalg.eigh(C + np.einsum("k,kij->ij", x, A))
        if w[-1] > worst:
            v = V[:, -1]
            worst, a = w[-1], np.einsum("i,kij,j->k", v, A, v)
    return a


def grid_oracle(data, points=None, tol=1e-7, max_iter=20000):
    """Bracket the optimum of ``min c.x`` by grid search and ellipsoid cuts.

    A zooming grid search over feasible grid points gives a feasible
    starting value.  A central-cut ellipsoid method then refines it: at an
    infeasible centre it cuts with the top-eigenvector subgradient of the
    most violated block (or the violated box face), at a feasible centre
    with the objective.  The optimum never leaves the ellipsoid, so
    ``c.x_centre - sqrt(c^T P c)`` is a lower bound.

    Returns
    -------
    upper : float
        Objective of the best feasible point found.
    lower : float
        Certified lower bound on the optimum.
    x : ndarray
        The best feasible point.
    """
    c = np.asarray(data["c"], float)
    k = len(c)
    ub, xb = _grid_stage(data, points, 1e-4)
    lo, hi = data["lo"], data["hi"]
    x = 0.5 * (lo + hi)
    P = np.eye(k) * float(np.sum((0.5 * (hi - lo)) ** 2))
    lb = -np.inf
    for _ in range(max_iter):
        a = _cut(data, x)
        if a is None:
            if c @ x < ub:
                ub, xb = float(c @ x), x.copy()
            a = c
        lb = max(lb, float(c @ x - np.sqrt(c @ P @ c)))
        if ub - lb <= tol:
            break
        Pa = P @ a
        den = float(np.sqrt(a @ Pa))
        if den <= 0.0:
            break
        if k == 1:
            x = x - 0.5 * Pa / den
            P = 0.25 * P
            continue
        b = Pa / den
        x = x - b / (k + 1)
        P = (k * k / (k * k - 1.0)) * (P - (2.0 / (k + 1)) * np.outer(b, b))
        P = 0.5 * (P + P.T)
    return ub, lb, xb
