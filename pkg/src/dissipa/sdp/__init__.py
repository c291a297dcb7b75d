"""Semidefinite programming: problem model, equilibration and solvers."""
from __future__ import annotations

import numpy as np

from .ipm import solve_ipm
from .program import (BlockGroup, ConicProgram, LMIBlock, ResidualReport, Solution, SolverSettings,
                      check_solution, write_sparse_text)
from .scaling import ScaleMap, condition_measure, scale_program

__all__ = ["BlockGroup", "ConicProgram", "LMIBlock", "ResidualReport", "Solution", "SolverSettings",
           "check_solution", "write_sparse_text", "ScaleMap", "condition_measure", "scale_program",
           "solve", "solve_ipm"]


def solve(program: ConicProgram, settings: SolverSettings = None) -> Solution:
    """Solve ``program`` and report residuals recomputed on the original data.

    ``"optimal"`` is returned only when every block of the original
    (unscaled) program has max eigenvalue at most ``feas_tol`` and every
    linear row holds to ``infeas_tol``.
    """
    st = settings or SolverSettings()
    if st.backend != "ipm":
        return _solve_cvxpy(program, st)
    if st.scale:
        q, smap = scale_program(program)
        to_orig = smap.unscale_x
    else:
        q, to_orig = program, (lambda v: np.asarray(v, float))

    def accept(y_scaled):
        return check_solution(program, to_orig(y_scaled), st.feas_tol, st.infeas_tol).ok

    res = solve_ipm(q, st, accept=accept, obj_scale=smap.obj_scale if st.scale else 1.0)
    x = to_orig(res.y)
    rep = check_solution(program, x, st.feas_tol, st.infeas_tol)
    status = res.status
    if status == "optimal" and not rep.ok:  # pragma: no cover - guarded by accept
        status = "numerical_trouble"
    obj = float(program.c @ x)
    dual = res.dual_bound * (smap.obj_scale if st.scale else 1.0)
    info = dict(res.info)
    info["worst_blocks"] = rep.worst_blocks(3)
    return Solution(status, x, obj, float(dual), float(rep.max_block),
                    float(max(rep.max_ineq, rep.max_eq, 0.0)) if np.isfinite(rep.max_ineq) else float(rep.max_eq),
                    res.iterations, info)


def _solve_cvxpy(program: ConicProgram, st: SolverSettings) -> Solution:  # pragma: no cover - optional
    try:
        import cvxpy as cp
    except ImportError as exc:
        raise RuntimeError(f"backend {st.backend!r} needs cvxpy") from exc
    y = cp.Variable(program.n_vars)
    cons = []
    for g in program.groups:
        for k in range(g.count):
            expr = g.constant[k]
            for a, v in enumerate(g.index[k]):
                expr = expr + y[int(v)] * g.coef[k, a]
            s = g.size
            cons.append(0.5 * (expr + expr.T) << 0 if s > 1 else expr[0, 0] <= 0)
    G, h = program.inequalities()
    if G.shape[0]:
        cons.append(G @ y <= h)
    E, f = program.equalities()
    if E.shape[0]:
        cons.append(E @ y == f)
    prob = cp.Problem(cp.Minimize(program.c @ y), cons)
    prob.solve(solver=st.backend.upper())
    mapping = {"optimal": "optimal", "infeasible": "infeasible", "unbounded": "unbounded"}
    status = mapping.get(prob.status, "numerical_trouble")
    x = np.asarray(y.value if y.value is not None else np.zeros(program.n_vars), float)
    rep = check_solution(program, x, st.feas_tol, st.infeas_tol)
    if status == "optimal" and not rep.ok:
        status = "numerical_trouble"
    return Solution(status, x, float(program.c @ x), float(prob.value) if status == "optimal" else np.nan,
                    rep.max_block, max(rep.max_ineq, rep.max_eq, 0.0), 0, {"backend": st.backend})
