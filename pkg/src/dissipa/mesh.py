"""Kuhn triangulations of hyperboxes and per-simplex geometry.

Every grid cell is split into ``n!`` simplices, one per permutation ``pi``
of the axes, with vertices ``v_0 = corner`` and ``v_k = v_{k-1} + e_{pi(k)}``.
A simplex that has the origin as a vertex stores it at local index 0.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Triangulation", "SimplexGeometry", "MeshError", "kuhn_triangulate",
           "simplex_geometry", "geometry_from_vertices", "cpa_gradient", "cpa_gradient_matrix", "locate", "export_csv"]

_GRID_TOL = 1e-9


class MeshError(ValueError):
    """Invalid triangulation request or point location failure."""


@dataclass(frozen=True)
class SimplexGeometry:
    """Geometry of one simplex.

    Attributes
    ----------
    vertices : ndarray, shape (n+1, n)
        Vertex coordinates in stored local order.
    X : ndarray, shape (n, n)
        Rows ``x_j - x_0`` for ``j = 1..n``.
    X_inv : ndarray, shape (n, n)
    c : ndarray, shape (n+1,)
        Taylor-remainder distance constants, origin-expansion form for
        simplices containing the origin and max-squared-distance form
        otherwise.
    contains_origin : bool
    bounding_box : ndarray, shape (n, 2)
    """

    vertices: np.ndarray
    X: np.ndarray
    X_inv: np.ndarray
    c: np.ndarray
    contains_origin: bool
    bounding_box: np.ndarray


def c_max_squared(verts: np.ndarray) -> np.ndarray:
    """``c_j = max_nu |x_j - x_nu|^2`` for vertex arrays ``(..., n+1, n)``."""
    d = verts[..., :, None, :] - verts[..., None, :, :]
    return np.max(np.sum(d * d, axis=-1), axis=-1)


def c_origin(verts: np.ndarray) -> np.ndarray:
    """``c_j = |x_j - x_0| (max_k |x_k - x_0| + |x_j - x_0|)`` (expansion about ``x_0``)."""
    r = np.linalg.norm(verts - verts[..., :1, :], axis=-1)
    return r * (np.max(r, axis=-1, keepdims=True) + r)


@dataclass(frozen=True, eq=False)
class Triangulation:
    """Uniform Kuhn triangulation of a box, optionally minus a cell-aligned cube.

    Attributes
    ----------
    vertices : ndarray, shape (V, n)
    simplices : ndarray, shape (K, n+1)
        Vertex indices in stored local order.
    region : ndarray, shape (n, 2)
    exclusion : ndarray or None, shape (n, 2)
    divisions : ndarray of int, shape (n,)
    spacing : ndarray, shape (n,)
    max_diameter : float
    X, X_inv, c, contains_origin, bbox :
        Eagerly computed per-simplex geometry (arrays over simplices).
    """

    vertices: np.ndarray
    simplices: np.ndarray
    region: np.ndarray
    exclusion: np.ndarray | None
    divisions: np.ndarray
    spacing: np.ndarray
    max_diameter: float
    X: np.ndarray
    X_inv: np.ndarray
    c: np.ndarray
    contains_origin: np.ndarray
    bbox: np.ndarray
    _lookup: np.ndarray  # (n_cells, n!) -> simplex id or -1
    _perm_code: np.ndarray  # base-n permutation key -> permutation rank

    @property
    def n(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_simplices(self) -> int:
        return self.simplices.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def simplex_vertices(self) -> np.ndarray:
        """Vertex coordinates per simplex, shape ``(K, n+1, n)``."""
        return self.vertices[self.simplices]

    def origin_vertex(self) -> int | None:
        hit = np.flatnonzero(np.all(np.abs(self.vertices) < _GRID_TOL * np.max(self.spacing), axis=1))
        return int(hit[0]) if hit.size else None

    def volumes(self) -> np.ndarray:
        return np.abs(np.linalg.det(self.X)) / math.factorial(self.n)


def _check_aligned(value, lo, d, what):
    k = (value - lo) / d
    if np.any(np.abs(k - np.round(k)) > _GRID_TOL * np.maximum(1.0, np.abs(k))):
        raise MeshError(f"{what} is not aligned with the grid")
    return np.round(k).astype(int)


def kuhn_triangulate(box, divisions, exclusion=None) -> Triangulation:
    """Triangulate ``box`` with ``divisions`` cells per axis.

    Parameters
    ----------
    box : array_like, shape (n, 2)
        Rows ``[lo, hi]``.
    divisions : int or sequence of int
        Number of grid cells per axis.
    exclusion : array_like, shape (n, 2), optional
        Cell-aligned box around the origin whose cells are omitted.

    Raises
    ------
    MeshError
        If the origin is not a grid vertex or the exclusion is misaligned.
    """
    box = np.atleast_2d(np.asarray(box, dtype=float))
    n = box.shape[0]
    lo, hi = box[:, 0], box[:, 1]
    div = np.broadcast_to(np.asarray(divisions, dtype=int), (n,)).copy()
    if np.any(div < 1) or np.any(hi <= lo):
        raise MeshError("box must be nonempty and divisions >= 1")
    d = (hi - lo) / div
    inside = (lo < 0) & (hi > 0)
    if exclusion is None and not np.all(inside):
        raise MeshError("the origin must lie strictly inside the box")
    _check_aligned(np.zeros(n), lo, d, "the origin")
    ex_idx = None
    if exclusion is not None:
        exclusion = np.atleast_2d(np.asarray(exclusion, dtype=float))
        if exclusion.shape != (n, 2):
            raise MeshError("exclusion must have shape (n, 2)")
        if np.any(exclusion[:, 0] >= 0) or np.any(exclusion[:, 1] <= 0):
            raise MeshError("exclusion must contain the origin in its interior")
        if np.any(exclusion[:, 0] < lo) or np.any(exclusion[:, 1] > hi):
            raise MeshError("exclusion must lie inside the box")
        ex_idx = np.stack([_check_aligned(exclusion[:, 0], lo, d, "exclusion"),
                           _check_aligned(exclusion[:, 1], lo, d, "exclusion")], axis=1)

    # cells
    cells = np.stack(np.meshgrid(*[np.arange(k) for k in div], indexing="ij"), -1).reshape(-1, n)
    keep = np.ones(len(cells), dtype=bool)
    if ex_idx is not None:
        keep = ~np.all((cells >= ex_idx[:, 0]) & (cells < ex_idx[:, 1]), axis=1)
    perms = list(itertools.permutations(range(n)))
    P = len(perms)
    # grid vertex coordinates of every (cell, perm)
    eye = np.eye(n, dtype=int)
    steps = np.zeros((P, n + 1, n), dtype=int)
    for q, perm in enumerate(perms):
        for k, ax in enumerate(perm):
            steps[q, k + 1] = steps[q, k] + eye[ax]
    kept_cells = np.flatnonzero(keep)
    grid_pts = cells[kept_cells][:, None, None, :] + steps[None]  # (C, P, n+1, n)
    grid_pts = grid_pts.reshape(-1, n + 1, n)
    strides = np.cumprod(np.concatenate([[1], (div + 1)[::-1][:-1]]))[::-1]
    gid = grid_pts @ strides
    used, inv = np.unique(gid.ravel(), return_inverse=True)
    simp = inv.reshape(-1, n + 1)
    # coordinates of used vertices
    coords_idx = np.stack(np.unravel_index(used, tuple(div + 1)), axis=1)
    verts = lo + coords_idx * d
    verts[np.abs(verts) < _GRID_TOL * np.max(d)] = 0.0
    # origin-first reordering
    origin_gid = int(np.round(-lo / d).astype(int) @ strides)
    is_o = gid == origin_gid
    has_o = is_o.any(axis=1)
    if has_o.any():
        rows = np.flatnonzero(has_o)
        pos = np.argmax(is_o[rows], axis=1)
        for r, p_ in zip(rows, pos):
            if p_:
                simp[r] = np.concatenate([[simp[r, p_]], np.delete(simp[r], p_)])
    # lookup table (cell, perm) -> simplex id
    lookup = -np.ones((len(cells), P), dtype=np.int64)
    lookup[kept_cells] = np.arange(len(kept_cells) * P).reshape(-1, P)
    code = -np.ones(n ** n, dtype=np.int64)
    for q, perm in enumerate(perms):
        code[np.asarray(perm) @ (n ** np.arange(n))] = q

    sv = verts[simp]
    X = sv[:, 1:, :] - sv[:, :1, :]
    dets = np.linalg.det(X)
    if np.any(np.abs(dets) <= 1e-12 * np.prod(d)):
        raise MeshError("degenerate simplex produced")
    X_inv = np.linalg.inv(X)
    c = c_max_squared(sv)
    if has_o.any():
        c[has_o] = c_origin(sv[has_o])
        c[has_o, 0] = 0.0
    bbox = np.stack([sv.min(axis=1), sv.max(axis=1)], axis=-1)
    diam = float(np.sqrt(np.max(c_max_squared(sv[:1])))) if len(sv) else 0.0
    return Triangulation(verts, simp, box.copy(), exclusion, div, d, diam, X, X_inv, c,
                         has_o, bbox, lookup, code)


def simplex_geometry(t: Triangulation, i: int) -> SimplexGeometry:
    """Geometry record of simplex ``i``."""
    if not 0 <= i < t.n_simplices:
        raise IndexError(f"simplex index {i} out of range")
    sv = t.vertices[t.simplices[i]]
    return SimplexGeometry(sv, t.X[i], t.X_inv[i], t.c[i], bool(t.contains_origin[i]), t.bbox[i])


def geometry_from_vertices(verts, origin_first: bool = True) -> SimplexGeometry:
    """Geometry of an arbitrary simplex given its vertices ``(n+1, n)``."""
    sv = np.asarray(verts, dtype=float)
    n = sv.shape[1]
    norms = np.linalg.norm(sv, axis=1)
    has_o = bool(np.any(norms == 0.0))
    if has_o and origin_first:
        j = int(np.argmin(norms))
        sv = np.concatenate([sv[j:j + 1], np.delete(sv, j, axis=0)])
    X = sv[1:] - sv[:1]
    if abs(np.linalg.det(X)) <= 1e-12 * max(1.0, np.max(np.abs(X)) ** n):
        raise MeshError("affinely dependent simplex vertices")
    c = c_origin(sv) if has_o else c_max_squared(sv)
    if has_o:
        c[0] = 0.0
    bbox = np.stack([sv.min(axis=0), sv.max(axis=0)], axis=-1)
    return SimplexGeometry(sv, X, np.linalg.inv(X), c, has_o, bbox)


def cpa_gradient_matrix(X_inv: np.ndarray) -> np.ndarray:
    """Linear map ``T`` with ``grad V = T @ values`` for vertex values ``(n+1,)``.

    Works on batches: ``X_inv`` of shape ``(..., n, n)`` gives ``(..., n, n+1)``.
    """
    first = -X_inv.sum(axis=-1, keepdims=True)
    return np.concatenate([first, X_inv], axis=-1)


def cpa_gradient(values, g: SimplexGeometry) -> np.ndarray:
    """Gradient of the affine interpolant of ``values`` on a simplex."""
    w = np.asarray(values, dtype=float)
    return g.X_inv @ (w[1:] - w[0])


def _try_lookup(t: Triangulation, cell, u):
    n = t.n
    order = np.argsort(-u, axis=1, kind="stable")
    lin = np.ravel_multi_index(tuple(cell.T), tuple(t.divisions))
    key = order @ (n ** np.arange(n))
    return t._lookup[lin, t._perm_code[key]]


def locate(t: Triangulation, x, tol: float = 1e-10):
    """Find containing simplices and barycentric weights.

    Parameters
    ----------
    t : Triangulation
    x : array_like, shape (n,) or (N, n)

    Returns
    -------
    idx : int or ndarray of int
    lam : ndarray, shape (n+1,) or (N, n+1)
        Weights in stored local vertex order.

    Raises
    ------
    MeshError
        If a point lies outside the triangulated set.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    lo = t.region[:, 0]
    s = (X - lo) / t.spacing
    if np.any(s < -tol) or np.any(s > t.divisions + tol):
        raise MeshError("point outside the triangulated region")
    cell = np.clip(np.floor(s).astype(int), 0, t.divisions - 1)
    u = np.clip(s - cell, 0.0, 1.0)
    idx = _try_lookup(t, cell, u)
    bad = np.flatnonzero(idx < 0)
    for r in bad:
        # boundary of an excluded cell: try neighbouring cells
        lowax = np.flatnonzero(u[r] < 1e-9)
        highax = np.flatnonzero(u[r] > 1 - 1e-9)
        found = -1
        cand_axes = [(a, -1) for a in lowax] + [(a, 1) for a in highax]
        for k in range(1, len(cand_axes) + 1):
            for combo in itertools.combinations(cand_axes, k):
                c2, u2 = cell[r].copy(), u[r].copy()
                ok = True
                for a, sgn in combo:
                    c2[a] += sgn
                    u2[a] = 1.0 if sgn < 0 else 0.0
                    ok &= 0 <= c2[a] < t.divisions[a]
                if ok:
                    j = _try_lookup(t, c2[None], u2[None])[0]
                    if j >= 0:
                        found = j
                        break
            if found >= 0:
                break
        if found < 0:
            raise MeshError(f"point {X[r].tolist()} lies in the excluded region")
        idx[r] = found
    v0 = t.vertices[t.simplices[idx, 0]]
    lam_rest = np.einsum("ki,kij->kj", X - v0, t.X_inv[idx])
    lam = np.concatenate([1.0 - lam_rest.sum(axis=1, keepdims=True), lam_rest], axis=1)
    lam[np.abs(lam) < tol] = 0.0
    if single:
        return int(idx[0]), lam[0]
    return idx, lam


def export_csv(t: Triangulation, directory, prefix: str = "mesh"):
    """Write ``<prefix>_vertices.csv`` and ``<prefix>_simplices.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = t.n
    vpath = directory / f"{prefix}_vertices.csv"
    spath = directory / f"{prefix}_simplices.csv"
    with open(vpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex"] + [f"x{i + 1}" for i in range(n)])
        for k, v in enumerate(t.vertices):
            w.writerow([k] + [repr(float(a)) for a in v])
    with open(spath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["simplex"] + [f"v{j}" for j in range(n + 1)])
        for k, s in enumerate(t.simplices):
            w.writerow([k] + [int(a) for a in s])
    return vpath, spath
