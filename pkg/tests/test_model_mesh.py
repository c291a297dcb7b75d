import math

import numpy as np
import pytest

from dissipa.mesh import (MeshError, cpa_gradient, export_csv, geometry_from_vertices, kuhn_triangulate, locate,
                          simplex_geometry)
from dissipa.model import DynamicsModel, ModelError


# -- model -----------------------------------------------------------------------------------

def test_model_requires_zero_at_origin():
    with pytest.raises(ModelError):
        DynamicsModel.from_strings(1, 1, 1, ["x1 + 1"], ["x1"])
    with pytest.raises(ModelError):
        DynamicsModel.from_strings(1, 1, 1, ["x1"], ["cos(x1)"])


def test_model_shapes_and_rhs(pendulum):
    X = np.array([[0.1, 0.2], [0.3, -0.4]])
    u = np.array([[0.5], [-1.0]])
    dx = pendulum.rhs(X, u)
    np.testing.assert_allclose(dx[:, 0], X[:, 1])
    np.testing.assert_allclose(dx[:, 1], -np.sin(X[:, 0]) - X[:, 1] + u[:, 0])
    np.testing.assert_allclose(pendulum.output(X, u)[:, 0], X[:, 1])
    assert pendulum.has_affine_terms


def test_region_division_check():
    m = DynamicsModel.from_strings(1, 1, 1, ["x1/(1 + x1)"], ["x1"])
    m.check_region([[-0.5, 0.5]])
    with pytest.raises(ModelError):
        m.check_region([[-2.0, 0.5]])


def test_model_description_roundtrip(poly3d):
    m2 = DynamicsModel.from_description(poly3d.describe())
    X = np.random.default_rng(0).uniform(-0.5, 0.5, (10, 3))
    np.testing.assert_allclose(m2.f_at(X), poly3d.f_at(X))


# -- triangulation ---------------------------------------------------------------------------

def test_kuhn_counts():
    assert kuhn_triangulate([[-1, 1]], 20).n_simplices == 20
    assert kuhn_triangulate([[-1, 1], [-1, 1]], 2).n_simplices == 4 * 2  # n! per cell
    assert kuhn_triangulate([[-1, 1]], 20, [[-0.1, 0.1]]).n_simplices == 18
    assert kuhn_triangulate([[-1, 1]] * 3, 4).n_simplices == 64 * 6


def test_kuhn_errors():
    with pytest.raises(MeshError):
        kuhn_triangulate([[-1, 1]], 3)  # origin not on the grid
    with pytest.raises(MeshError):
        kuhn_triangulate([[-1, 1]], 20, [[-0.15, 0.15]])  # not cell aligned


@pytest.mark.parametrize("n,div,ex", [(1, 10, None), (2, 6, None), (2, 6, 1), (3, 4, 1)])
def test_volume_conservation(n, div, ex):
    box = np.array([[-1.0, 1.0]] * n)
    h = 2.0 / div
    exc = None if ex is None else np.array([[-ex * h, ex * h]] * n)
    t = kuhn_triangulate(box, div, exc)
    vol = 2.0 ** n - (0.0 if exc is None else (2 * ex * h) ** n)
    assert abs(t.volumes().sum() - vol) <= 1e-9 * vol
    assert np.all(np.abs(np.linalg.det(t.X)) > 1e-12)
    used = np.zeros(t.n_vertices, bool)
    used[t.simplices.ravel()] = True
    assert used.all()


def test_origin_first():
    t = kuhn_triangulate([[-1, 1], [-1, 1]], 4)
    sv = t.simplex_vertices[t.contains_origin]
    assert len(sv) == 6
    assert np.all(sv[:, 0] == 0.0)
    assert np.all(t.c[t.contains_origin, 0] == 0.0)


def test_geometry_examples():
    g = geometry_from_vertices([[0.0], [0.1]])
    np.testing.assert_allclose(g.X, [[0.1]])
    np.testing.assert_allclose(g.c, [0.0, 0.02])
    g = geometry_from_vertices([[0.5], [0.6]])
    np.testing.assert_allclose(g.c, [0.01, 0.01])
    g = geometry_from_vertices([[0, 0], [1, 0], [0, 1]])
    np.testing.assert_allclose(g.X, np.eye(2))
    np.testing.assert_allclose(g.X @ g.X_inv, np.eye(2), atol=1e-10)


def test_cpa_gradient_examples():
    g = geometry_from_vertices([[0.0], [0.1]])
    assert cpa_gradient([0.0, 0.05], g)[0] == pytest.approx(0.5)
    assert np.all(cpa_gradient([1.0, 1.0], g) == 0.0)
    g2 = geometry_from_vertices([[0, 0], [1, 0], [0, 1]])
    np.testing.assert_allclose(cpa_gradient([0.0, 2.0, 3.0], g2), [2.0, 3.0])


def test_locate_examples(rng):
    t = kuhn_triangulate([[-1, 1], [-1, 1]], 6)
    i, lam = locate(t, t.vertices[t.simplices[5, 2]])
    assert lam.max() == pytest.approx(1.0)
    t1 = kuhn_triangulate([[-1, 1]], 10)
    i, lam = locate(t1, [0.1])
    np.testing.assert_allclose(np.sort(lam), [0.5, 0.5])
    X = rng.uniform(-1, 1, (500, 2))
    idx, lam = locate(t, X)
    assert np.all(lam >= -1e-10)
    np.testing.assert_allclose(lam.sum(axis=1), 1.0, atol=1e-12)
    rec = np.einsum("kj,kji->ki", lam, t.simplex_vertices[idx])
    np.testing.assert_allclose(rec, X, atol=1e-10)
    with pytest.raises(MeshError):
        locate(t, [1.5, 0.0])
    te = kuhn_triangulate([[-1, 1], [-1, 1]], 6, [[-1 / 3, 1 / 3]] * 2)
    with pytest.raises(MeshError):
        locate(te, [0.0, 0.0])


def test_cpa_continuity_across_faces(rng):
    t = kuhn_triangulate([[-1, 1], [-1, 1]], 6)
    vals = rng.standard_normal(t.n_vertices)
    grads = np.stack([cpa_gradient(vals[s], simplex_geometry(t, i)) for i, s in enumerate(t.simplices)])
    # shared faces: evaluate both affine pieces at random face points
    faces = {}
    for i, s in enumerate(t.simplices):
        for drop in range(3):
            key = tuple(sorted(np.delete(s, drop)))
            faces.setdefault(key, []).append(i)
    shared = [(k, v) for k, v in faces.items() if len(v) == 2]
    assert shared
    worst = 0.0
    for (a, b), (i, j) in shared[:100]:
        w = rng.random()
        x = w * t.vertices[a] + (1 - w) * t.vertices[b]
        vi = vals[t.simplices[i, 0]] + grads[i] @ (x - t.vertices[t.simplices[i, 0]])
        vj = vals[t.simplices[j, 0]] + grads[j] @ (x - t.vertices[t.simplices[j, 0]])
        worst = max(worst, abs(vi - vj))
    assert worst <= 1e-10


def test_export_csv(tmp_path):
    t = kuhn_triangulate([[-1, 1], [-1, 1]], 2)
    v, s = export_csv(t, tmp_path)
    assert v.read_text().splitlines()[0] == "vertex,x1,x2"
    assert len(s.read_text().splitlines()) == t.n_simplices + 1
