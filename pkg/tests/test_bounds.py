import math

import numpy as np
import pytest

from dissipa.bounds import gradient_norm_bound_vars, origin_ball_data, simplex_bounds, triangulation_bounds
from dissipa.expr import evaluate, hessian_exprs
from dissipa.mesh import geometry_from_vertices, kuhn_triangulate
from dissipa.model import DynamicsModel


def test_simplex_bounds_examples(conic, pendulum):
    b = simplex_bounds(conic, geometry_from_vertices([[0.5], [0.6]]))
    assert b.beta == pytest.approx(3.6)
    assert np.all(b.mu == 0.0) and b.theta == 0.0 and np.all(b.rho == 0.0)
    g = geometry_from_vertices([[0.0, 0.0], [0.3, 0.0], [0.3, 0.3]])
    b = simplex_bounds(pendulum, g)
    assert b.beta == pytest.approx(math.sin(0.3), rel=1e-12)
    grid = np.linspace(0, 0.3, 1001)
    assert b.beta >= np.max(np.abs(np.sin(grid)))


def test_origin_ball_examples(conic, pendulum):
    lin = DynamicsModel.from_strings(2, 1, 1, ["-x1 + 2*x2", "-3*x2"], ["x1"], B=[[0.0], [1.0]])
    d = origin_ball_data(lin, 0.3)
    assert d.beta_eps == 0.0
    np.testing.assert_allclose(d.J_f, [[-1, 2], [0, -3]])
    d = origin_ball_data(conic, 0.2)
    np.testing.assert_allclose(d.J_f, [[-3.0]])
    assert d.beta_eps == pytest.approx(1.2)
    d = origin_ball_data(pendulum, 0.2)
    np.testing.assert_allclose(d.J_f, [[0, 1], [-1, -1]])
    with pytest.raises(ValueError):
        origin_ball_data(conic, 0.0)


def test_bounds_dominate_sampling_and_shrink(poly3d, rng):
    t = kuhn_triangulate([[-0.5, 0.5]] * 3, 4)
    bt = triangulation_bounds(poly3d, t)
    hs = [hessian_exprs(e, 3) for e in poly3d.f]
    for i in rng.choice(t.n_simplices, 20, replace=False):
        sv = t.simplex_vertices[i]
        e = rng.exponential(size=(10_000, 4))
        X = (e / e.sum(axis=1, keepdims=True)) @ sv
        sampled = max(float(np.max(np.abs(evaluate(d, X)))) for h in hs for d in h.values())
        assert bt.beta[i] >= sampled - 1e-12
        # monotone under shrinking: a sub-simplex has no larger bound
        sub = 0.5 * (sv + sv.mean(axis=0))
        bs = simplex_bounds(poly3d, geometry_from_vertices(sub, origin_first=False))
        assert bs.beta <= bt.beta[i] + 1e-12


def test_affine_model_zero_constants():
    lin = DynamicsModel.from_strings(2, 1, 1, ["-x1 + x2", "-x2"], ["x1"], G=[["0"], ["x1"]], B=[[0.0], [1.0]])
    t = kuhn_triangulate([[-1, 1]] * 2, 4)
    bt = triangulation_bounds(lin, t)
    assert np.all(bt.beta == 0) and np.all(bt.rho == 0) and np.all(bt.mu == 0) and np.all(bt.theta == 0)


def test_gradient_norm_template(rng):
    g = geometry_from_vertices([[0.0], [0.1]])
    tpl = gradient_norm_bound_vars(g)
    assert tpl.feasible([0.0, 0.05], 0.5) and not tpl.feasible([0.0, 0.05], 0.49)
    assert tpl.feasible([1.0, 1.0], 0.0)
    g2 = geometry_from_vertices([[0.1, 0.0], [0.4, 0.1], [0.2, 0.5]])
    tpl = gradient_norm_bound_vars(g2)
    aux = gradient_norm_bound_vars(g2, max_enum_dim=0)
    for _ in range(100):
        v = rng.standard_normal(3)
        l = rng.uniform(0, 10)
        direct = np.abs(g2.X_inv @ (v[1:] - v[0])).sum() <= l
        assert tpl.feasible(v, l) == direct
        assert aux.feasible(v, l) == direct
