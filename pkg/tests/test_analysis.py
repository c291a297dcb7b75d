import json

import numpy as np
import pytest

from dissipa.analysis import (AnalysisError, AnalysisRequest, AnalysisResult, analyze_no_affine, analyze_with_affine,
                              evaluate_storage, storage_gradient)
from dissipa.mesh import MeshError
from dissipa.model import DynamicsModel

from conftest import conic_model, solve_config


def _req(model, divisions, mode="l2_gain", **kw):
    box = tuple((-1.0, 1.0) for _ in range(model.n))
    kw.setdefault("verify_trials", 20)
    return AnalysisRequest(model=model, region=box, divisions=divisions, mode=mode, **kw)


def test_no_affine_conic_without_input_matrix():
    res = analyze_no_affine(_req(conic_model(B=0.0), 20))
    assert res.ok, res.message
    assert res.variant == "no_affine"
    assert np.isfinite(res.headline["gamma"])
    assert res.verification["passed"]
    assert np.all(res.certificate.values >= 0)
    # the storage vanishes at the origin
    assert evaluate_storage(res.certificate, [0.0]) == pytest.approx(0.0, abs=1e-12)


def test_no_input_path_has_zero_gain():
    model = DynamicsModel.from_strings(1, 1, 1, ["-x1"], ["x1"])
    res = analyze_no_affine(_req(model, 20))
    assert res.ok
    assert res.headline["gamma"] <= 1e-3


def test_zero_dynamics_gain_at_lower_bound():
    model = DynamicsModel.from_strings(1, 1, 1, ["0"], ["0"])
    res = analyze_no_affine(_req(model, 10))
    assert res.ok
    assert res.headline["gamma_squared"] <= 1e-6


def test_no_affine_rejects_input_matrix():
    with pytest.raises(AnalysisError):
        analyze_no_affine(_req(conic_model(), 20))


def test_headline_consistent_with_qsr():
    _, res = solve_config("conic1d", 20)
    a, b = res.headline["a"], res.headline["b"]
    assert res.S[0, 0] == pytest.approx((a + b) / 2, rel=1e-9)
    assert res.R[0, 0] == pytest.approx(-a * b, rel=1e-6, abs=1e-12)
    np.testing.assert_allclose(res.Q, [[-1.0]])


def test_storage_origin_vertex_and_region():
    _, res = solve_config("conic1d", 20)
    cert = res.certificate
    assert evaluate_storage(cert, [0.0]) == 0.0
    X = cert.tri.vertices
    far = np.flatnonzero(np.linalg.norm(X, axis=1) > cert.epsilon + 1e-9)
    np.testing.assert_allclose(evaluate_storage(cert, X[far]), cert.values[far], atol=1e-13)
    with pytest.raises(MeshError):
        evaluate_storage(cert, [1.5])


def test_storage_continuous_across_exclusion_boundary(rng):
    _, res = solve_config("pendulum", 18)
    cert = res.certificate
    ex = cert.exclusion
    # 100 points on the boundary of the excluded box
    t = rng.uniform(-1, 1, (100, 2)) * ex[:, 1]
    side = rng.integers(0, 2, 100)
    sign = rng.choice([-1.0, 1.0], 100)
    t[np.arange(100), side] = sign * ex[side, 1]
    normal = np.zeros_like(t)
    normal[np.arange(100), side] = sign
    h = 1e-9
    inner = evaluate_storage(cert, t - h * normal)
    outer = evaluate_storage(cert, t + h * normal)
    slope = np.max(np.abs(storage_gradient(cert, t + h * normal))) + np.max(np.abs(2 * t @ cert.P))
    assert np.max(np.abs(outer - inner)) <= 1e-8 + 2 * h * slope


@pytest.mark.parametrize("name", ["pendulum", "poly3d"])
def test_storage_continuous_across_ball_sphere(name, rng):
    # the storage switches from min(x^T P x, CPA) to CPA on |x| = epsilon
    _, res = solve_config(name)
    cert = res.certificate
    n = cert.P.shape[0]
    u = rng.normal(size=(400, n))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    x = cert.epsilon * u
    h = 1e-9
    inner = evaluate_storage(cert, x * (1 - h))
    outer = evaluate_storage(cert, x * (1 + h))
    slope = np.max(np.abs(storage_gradient(cert, x * (1 + h)))) + np.max(np.abs(2 * x @ cert.P))
    assert np.max(outer - inner) <= 1e-7 + 2 * h * cert.epsilon * slope * np.sqrt(n)


def test_monotone_refinement():
    objs, bs = [], []
    for div in (20, 200, 2000):
        _, res = solve_config("conic1d", div)
        assert res.ok, res.message
        objs.append(res.diagnostics["objective"])
        bs.append(res.headline["b"])
    assert objs[1] <= objs[0] + 1e-7 and objs[2] <= objs[1] + 1e-7
    assert min(bs) >= 0.5 - 1e-6


def test_pendulum_gain_above_analytic_bound():
    _, res = solve_config("pendulum", 18)
    assert res.ok, res.message
    assert res.headline["gamma"] >= 1.0 - 1e-6


def test_result_round_trip(tmp_path):
    _, res = solve_config("conic1d", 20)
    path = tmp_path / "r.json"
    path.write_text(json.dumps(res.to_dict()))
    back = AnalysisResult.from_dict(json.loads(path.read_text()))
    assert back.headline == pytest.approx(res.headline)
    xs = np.linspace(-1, 1, 41)[:, None]
    np.testing.assert_allclose(evaluate_storage(back.certificate, xs), evaluate_storage(res.certificate, xs))


def test_with_affine_variant_tag():
    res = analyze_with_affine(_req(conic_model(), 20, mode="l2_gain", verify=False))
    assert res.ok and res.variant == "with_affine" and res.certificate.P is not None
    assert np.all(np.linalg.eigvalsh(res.certificate.P) > 0)
