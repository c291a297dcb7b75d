import numpy as np
import pytest

from dissipa.bounds import origin_ball_data, simplex_bounds
from dissipa.expr import parse_expression
from dissipa.lmi import (DecisionVariableMap, LMIError, assemble_error_E, assemble_M, assemble_M_eps,
                         assemble_theorem3_bound, assemble_theorem4_bound, preset_qsr)
from dissipa.mesh import cpa_gradient_matrix, geometry_from_vertices
from dissipa.model import DynamicsModel
from dissipa.sdp import ConicProgram

from conftest import conic_model


def dense(block, y):
    out = np.array(block.constant, float)
    for v, c in block.terms:
        out = out + y[v] * c
    return out


def _simplex_1d(a, b):
    g = geometry_from_vertices([[a], [b]])
    return g, cpa_gradient_matrix(g.X_inv)


def _weights(prog, qsr, m, p, zs=(1, 2, 3)):
    vm = DecisionVariableMap(V=np.zeros(0, np.int64), l=np.zeros(0, np.int64), qsr=qsr)
    sizes = {1: m, 2: p, 3: p, 4: m, 5: m, 6: m, 7: p, 8: p, 9: p}
    for z in zs:
        vm.add_weight(prog, z, sizes[z] if (z in (1, 4, 5, 6) or qsr.has_Q) else 0)
    return vm


# -- presets ----------------------------------------------------------------------------

def test_preset_l2_gain():
    prog = ConicProgram()
    q = preset_qsr("l2_gain", prog, 2, 1)
    y = np.zeros(prog.n_vars)
    y[q.variables["alpha"]] = 4.0
    r = q.realize(y)
    np.testing.assert_allclose(r["Q"], -np.eye(2))
    np.testing.assert_allclose(r["S"], 0.0)
    np.testing.assert_allclose(r["R"], 4.0 * np.eye(1))
    assert r["headline"]["gamma"] == pytest.approx(2.0)
    assert prog.c[q.variables["alpha"]] == 1.0


def test_preset_output_strictly_passive():
    prog = ConicProgram()
    q = preset_qsr("output_strictly_passive", prog, 1, 1)
    y = np.zeros(prog.n_vars)
    y[q.variables["tau"]] = 0.5
    r = q.realize(y)
    assert r["headline"]["rho"] == pytest.approx(2.0)
    np.testing.assert_allclose(r["Q"], [[-2.0]])
    np.testing.assert_allclose(r["S"], [[0.5]])
    np.testing.assert_allclose(r["R"], 0.0)


def test_preset_conic():
    prog = ConicProgram()
    q = preset_qsr("conic", prog, 1, 1)
    a, b = -0.25, 0.75
    y = np.zeros(prog.n_vars)
    y[q.variables["alpha"]] = (a + b) / 2
    y[q.variables["beta"]] = a * b
    r = q.realize(y)
    np.testing.assert_allclose(r["Q"], [[-1.0]])
    np.testing.assert_allclose(r["S"], [[(a + b) / 2]])
    np.testing.assert_allclose(r["R"], [[-a * b]])
    assert r["headline"]["a"] == pytest.approx(a) and r["headline"]["b"] == pytest.approx(b)
    # objective alpha^2 - 2 beta through the epigraph variable
    assert prog.c[q.variables["t"]] == 1.0 and prog.c[q.variables["beta"]] == -2.0


def test_preset_reduced_and_errors():
    prog = ConicProgram()
    q = preset_qsr("input_strictly_passive", prog, 1, 1)
    assert q.reduced
    with pytest.raises(LMIError):
        preset_qsr("bogus", ConicProgram(), 1, 1)
    with pytest.raises(LMIError):
        preset_qsr("fixed_qsr", ConicProgram(), 1, 1, Q=[[1.0]])


def test_supply_rate_reconstruction(rng):
    prog = ConicProgram()
    q = preset_qsr("conic", prog, 1, 1)
    y = rng.standard_normal(prog.n_vars)
    r = q.realize(y)
    u, out = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
    ref = (out[:, 0] ** 2 * r["Q"][0, 0] + 2 * out[:, 0] * r["S"][0, 0] * u[:, 0] + u[:, 0] ** 2 * r["R"][0, 0])
    np.testing.assert_allclose(q.supply(y, u, out), ref)


# -- dissipation matrix -------------------------------------------------------------------

def test_M_linear_top_left(rng):
    model = DynamicsModel.from_strings(1, 1, 1, ["-x1"], ["x1"], B=[[1.0]])
    prog = ConicProgram()
    q = preset_qsr("l2_gain", prog, 1, 1)
    vv = prog.add_variables(2, "V")
    g, T = _simplex_1d(0.5, 0.6)
    blk = assemble_M(model, q, [0.5], T, vv)
    y = rng.standard_normal(prog.n_vars)
    grad = (y[vv[1]] - y[vv[0]]) / 0.1
    assert dense(blk, y)[0, 0] == pytest.approx(-0.5 * grad, rel=1e-12)


def test_M_zero_fields_at_origin(rng):
    model = DynamicsModel.from_strings(1, 1, 1, ["x1^2"], ["x1^2"])
    prog = ConicProgram()
    q = preset_qsr("l2_gain", prog, 1, 1)
    vv = prog.add_variables(2, "V")
    _, T = _simplex_1d(0.0, 0.1)
    y = rng.standard_normal(prog.n_vars)
    M = dense(assemble_M(model, q, [0.0], T, vv), y)
    np.testing.assert_allclose(M, np.diag([0.0, -y[q.variables["alpha"]], -1.0]), atol=1e-15)


def test_M_conic_dense_oracle(rng):
    Bc, Cc, Dc = 1.0, 1.0, 0.3
    model = conic_model(B=Bc, C=Cc, D=Dc)
    prog = ConicProgram()
    q = preset_qsr("conic", prog, 1, 1)
    vv = prog.add_variables(2, "V")
    _, T = _simplex_1d(0.8, 0.9)
    y = rng.standard_normal(prog.n_vars)
    M = dense(assemble_M(model, q, [0.8], T, vv), y)
    x = 0.8
    g = (y[vv[1]] - y[vv[0]]) / 0.1
    f = x ** 3 - 3 * x
    h = Cc * x
    al, be = y[q.variables["alpha"]], y[q.variables["beta"]]
    ref = np.array([[g * f, 0.5 * g * Bc - h * al, h],
                    [0.5 * g * Bc - h * al, be - 2 * al * Dc, Dc],
                    [h, Dc, -1.0]])
    np.testing.assert_allclose(M, ref, rtol=1e-12, atol=1e-12)


def test_M_symmetric_and_affine(rng, pendulum):
    prog = ConicProgram()
    q = preset_qsr("l2_gain", prog, 1, 1)
    vv = prog.add_variables(3, "V")
    g = geometry_from_vertices([[0.2, 0.1], [0.3, 0.1], [0.3, 0.2]])
    blk = assemble_M(pendulum, q, g.vertices[1], cpa_gradient_matrix(g.X_inv), vv)
    y = rng.standard_normal(prog.n_vars)
    M = dense(blk, y)
    assert np.max(np.abs(M - M.T)) <= 1e-14
    for v in range(prog.n_vars):
        e = np.zeros(prog.n_vars)
        e[v] = 0.37
        d2 = dense(blk, y + e) - 2 * M + dense(blk, y - e)
        assert np.max(np.abs(d2)) <= 1e-12


# -- error matrix ---------------------------------------------------------------------------

def test_error_matrix_affine_dynamics(rng):
    model = DynamicsModel.from_strings(2, 1, 1, ["-x1 + x2", "-x2"], ["x1"], B=[[0.0], [1.0]])
    prog = ConicProgram()
    q = preset_qsr("l2_gain", prog, 1, 1)
    vm = _weights(prog, q, 1, 1)
    l = int(prog.add_variables(1, "l")[0])
    g = geometry_from_vertices([[0.2, 0.1], [0.3, 0.1], [0.3, 0.2]])
    y = rng.uniform(0.1, 1, prog.n_vars)
    E = dense(assemble_error_E(model, q, simplex_bounds(model, g), g, 1, vm, l), y)
    d1, d2, d3 = (y[vm.d[z][0]] for z in (1, 2, 3))
    p1, p3 = y[vm.pmin[1]], y[vm.pmin[3]]
    ref = np.diag([0.0, 0.5 * d1, 0.5 * (d2 + d3), -2 * p1, -4 * p1, -2 * d2, -2 * p3])
    np.testing.assert_allclose(E, ref, atol=1e-15)


def test_error_matrix_scalar_oracle(rng):
    # nonzero remainders in every slot: f'' = 6x, h'' = 2, G'' = 2, J'' = 2
    model = DynamicsModel.from_strings(1, 1, 1, ["x1^3 - 3*x1"], ["x1 + x1^2"], G=[["x1^2"]], J=[["x1^2"]],
                                       B=[[1.0]])
    prog = ConicProgram()
    q = preset_qsr("conic", prog, 1, 1)
    vm = _weights(prog, q, 1, 1)
    l = int(prog.add_variables(1, "l")[0])
    g = geometry_from_vertices([[0.5], [0.6]])
    bnd = simplex_bounds(model, g)
    assert bnd.beta >= 3.6 - 1e-12 and bnd.beta <= 3.6 + 1e-9
    y = rng.uniform(0.1, 1, prog.n_vars)
    for j in range(2):
        E = dense(assemble_error_E(model, q, bnd, g, j, vm, l), y)
        c = 0.01                                      # squared simplex diameter in 1-D
        beta, rho, mu, theta = 3.6, 2.0, 2.0, 2.0
        s, L = y[q.variables["shat"]], y[l]
        d1, d2, d3 = (y[vm.d[z][0]] for z in (1, 2, 3))
        p1, p3 = y[vm.pmin[1]], y[vm.pmin[3]]
        ref = np.zeros((7, 7))
        ref[0, 0] = 0.5 * L * beta * c
        ref[1, 1] = 0.5 * (d1 + s * theta * c)
        ref[2, 2] = 0.5 * (d2 + d3)
        ref[3, 0] = s * rho * c
        ref[3, 3] = -2 * p1
        ref[4, 0] = L * mu * c
        ref[4, 4] = -4 * p1
        ref[5, 0] = rho * c
        ref[5, 5] = -2 * d2
        ref[6, 1] = theta * c
        ref[6, 6] = -2 * p3
        ref = np.tril(ref) + np.tril(ref, -1).T
        np.testing.assert_allclose(E, ref, rtol=1e-9, atol=1e-14)


def test_error_matrix_rejects_origin_vertex():
    model = conic_model()
    prog = ConicProgram()
    q = preset_qsr("conic", prog, 1, 1)
    vm = _weights(prog, q, 1, 1)
    g = geometry_from_vertices([[0.0], [0.1]])
    with pytest.raises(LMIError):
        assemble_error_E(model, q, simplex_bounds(model, g), g, 0, vm, 0)


def test_error_matrix_reduced_layout(rng):
    model = conic_model()
    prog = ConicProgram()
    q = preset_qsr("input_strictly_passive", prog, 1, 1)
    vm = _weights(prog, q, 1, 1)
    g = geometry_from_vertices([[0.5], [0.6]])
    blk = assemble_error_E(model, q, simplex_bounds(model, g), g, 0, vm, 0)
    # rows [1, m, p, m]: the Q-coupled rows are gone
    assert np.asarray(blk.constant).shape == (4, 4)


# -- origin ball ------------------------------------------------------------------------------

def _ball_program(model, mode, eps):
    prog = ConicProgram()
    q = preset_qsr(mode, prog, model.p, model.m)
    vm = _weights(prog, q, model.m, model.p, zs=(4, 5, 6, 7, 8, 9))
    n = model.n
    Pv = prog.add_variables(n * (n + 1) // 2, "P")
    P = np.zeros((n, n), np.int64)
    iu = np.triu_indices(n)
    P[iu] = Pv
    P[(iu[1], iu[0])] = Pv
    vm.P = P
    vm.lp = int(prog.add_variables(1, "lp")[0])
    Bt = assemble_M_eps(model, q, origin_ball_data(model, eps), vm)
    return prog, q, vm, Bt


def test_origin_ball_xi1_scalar(rng):
    prog, q, vm, Bt = _ball_program(conic_model(), "conic", 0.2)
    y = rng.uniform(0.1, 1, prog.n_vars)
    M = Bt.dense(0, y)
    p, lp = y[vm.P[0, 0]], y[vm.lp]
    assert M[0, 0] == pytest.approx(-6 * p + 0.24 * lp, rel=1e-9)
    assert np.max(np.abs(M - M.T)) <= 1e-14


def test_origin_ball_linear_kyp(rng):
    model = DynamicsModel.from_strings(2, 1, 1, ["-x1 + x2", "-2*x2"], ["x1"], B=[[0.0], [1.0]])
    prog, q, vm, Bt = _ball_program(model, "l2_gain", 0.3)
    y = rng.uniform(0.1, 1, prog.n_vars)
    M = Bt.dense(0, y)
    P = y[vm.P]
    A = np.array([[-1.0, 1.0], [0.0, -2.0]])
    Bm = np.array([[0.0], [1.0]])
    C = np.array([[1.0, 0.0]])
    al = y[q.variables["alpha"]]
    d4, d5, d6 = (y[vm.d[z][0]] for z in (4, 5, 6))
    d7, d8, d9 = (y[vm.d[z][0]] for z in (7, 8, 9))
    np.testing.assert_allclose(M[:2, :2], P @ A + A.T @ P, atol=1e-14)
    np.testing.assert_allclose(M[2:3, :2], Bm.T @ P, atol=1e-14)
    assert M[2, 2] == pytest.approx(-al + d4 + 0.5 * d5 + 0.5 * d6)
    np.testing.assert_allclose(M[3:4, :2], C)
    assert M[3, 3] == pytest.approx(-1.0 + 0.5 * d7 + d8 + 0.5 * d9)
    # the Hessian rows carry only their -pmin diagonals
    np.testing.assert_allclose(M[4:, :4], 0.0, atol=1e-15)


def test_origin_ball_theta_zero_hessian():
    model = DynamicsModel.from_strings(2, 1, 1, ["-x1", "-x2"], ["x1"], J=[["x1"]], B=[[0.0], [1.0]])
    ball = origin_ball_data(model, 0.7)
    assert ball.theta_eps == 0.0


def test_origin_ball_requires_data():
    prog = ConicProgram()
    q = preset_qsr("l2_gain", prog, 1, 1)
    with pytest.raises(LMIError):
        assemble_M_eps(conic_model(), q, None, _weights(prog, q, 1, 1, zs=(4, 5, 6, 7, 8, 9)))


# -- generic bounds ----------------------------------------------------------------------------

def test_theorem3_affine_functions():
    phi = parse_expression("2*x1 - 1", 1)
    zeta = [parse_expression("x1 + 3", 1)]
    M, E, _ = assemble_theorem3_bound(phi, zeta, [[0.5], [0.6]], [0.5])
    for j in range(2):
        np.testing.assert_allclose(E[j], np.diag([0.0, 0.5 * 2.0, -2 * 2.0]), atol=1e-15)


def test_theorem3_phi_quadratic():
    M, E, _ = assemble_theorem3_bound(parse_expression("x1^2", 1), [parse_expression("0", 1)],
                                      [[0.5], [0.6]], [1.0])
    # phi_hat = 2 * c = 0.02, entered as phi_hat / 2
    np.testing.assert_allclose(E[:, 0, 0], 0.5 * 0.02, rtol=1e-9)


def test_theorem3_zeta_quadratic_brute_force():
    zeta = parse_expression("3*x1^2", 1)
    _, E, V = assemble_theorem3_bound(parse_expression("0", 1), [zeta], [[0.5], [0.6]], [1.0])
    xs = np.linspace(0.5, 0.6, 2001)
    for j in range(2):
        xj = V[j, 0]
        rem = np.max(np.abs(3 * xs ** 2 - 3 * xj ** 2 - 6 * xj * (xs - xj)))
        zh = E[j, 2, 0]
        assert zh == pytest.approx(6.0 * 0.01, rel=1e-9)
        assert rem <= zh


def test_theorem4_linear_small_eps():
    th = [parse_expression("-x1", 1)]
    M = assemble_theorem4_bound(th, [parse_expression("0", 1)], 1e-3, [1.0])
    assert M[0, 0] == pytest.approx(-1.0)
    assert np.linalg.eigvalsh(M).max() < 0


def test_theorem4_eps_scaling():
    th = [parse_expression("-x1 + x1^2", 1)]
    z = [parse_expression("0", 1)]
    a = assemble_theorem4_bound(th, z, 1e-6, [1.0])[0, 0]
    b = assemble_theorem4_bound(th, z, 1e-3, [1.0])[0, 0]
    assert a == pytest.approx(-1.0, abs=1e-5) and b > a


@pytest.mark.parametrize("theta,expect", [("-x1 + x1^2", True), ("x1 + x1^2", False)])
def test_theorem4_matches_grid(theta, expect):
    th = [parse_expression(theta, 1)]
    z = [parse_expression("x1^2", 1)]
    xs = np.linspace(-0.1, 0.1, 20001)
    t = eval(theta.replace("^", "**"), {"x1": xs})
    grid_ok = bool(np.all(xs ** 4 + xs * t <= 1e-12))
    feas = any(np.linalg.eigvalsh(assemble_theorem4_bound(th, z, 0.1, [pi])).max() <= 0
               for pi in np.logspace(-3, 3, 61))
    assert grid_ok == expect
    # soundness: feasibility of the matrix bound implies the sampled inequality
    assert feas == expect
