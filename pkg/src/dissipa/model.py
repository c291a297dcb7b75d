"""Control-affine dynamics model.

    xdot = f(x) + (B + G(x)) u
    y    = h(x) + (D + J(x)) u

with ``f(0) = 0``, ``G(0) = 0``, ``h(0) = 0`` and ``J(0) = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .expr import (Expression, ExpressionDomainError, Num, differentiate, evaluate,
                   hessian_exprs, interval_range, parse_expression)

__all__ = ["DynamicsModel", "ModelError"]


class ModelError(ValueError):
    """Inconsistent model definition."""


def _parse_vec(items, n, name):
    out = []
    for k, s in enumerate(items):
        if isinstance(s, Expression):
            out.append(s)
        elif isinstance(s, (int, float)):
            out.append(Num(float(s)))
        else:
            try:
                out.append(parse_expression(str(s), n))
            except ValueError as exc:
                raise ModelError(f"{name}[{k}]: {exc}") from exc
    return out


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    """Control-affine model with expression-valued fields.

    Parameters
    ----------
    n, m, p : int
        State, input and output dimensions.
    f : list of Expression
        Drift, length ``n``.
    G : list of list of Expression
        State-dependent input matrix, ``n x m``.
    h : list of Expression
        Output map, length ``p``.
    J : list of list of Expression
        State-dependent feedthrough, ``p x m``.
    B, D : ndarray
        Constant input matrix ``n x m`` and feedthrough ``p x m``.
    """

    n: int
    m: int
    p: int
    f: tuple
    G: tuple
    h: tuple
    J: tuple
    B: np.ndarray = field(repr=False)
    D: np.ndarray = field(repr=False)
    name: str = "model"

    @classmethod
    def from_strings(cls, n, m, p, f, h, G=None, J=None, B=None, D=None, name="model",
                     check_origin: bool = True):
        """Build a model from expression strings; omitted fields are zero."""
        f_e = _parse_vec(f, n, "f")
        h_e = _parse_vec(h, n, "h")
        G = G if G is not None else [["0"] * m for _ in range(n)]
        J = J if J is not None else [["0"] * m for _ in range(p)]
        if len(G) != n or any(len(r) != m for r in G):
            raise ModelError(f"G must be {n}x{m}")
        if len(J) != p or any(len(r) != m for r in J):
            raise ModelError(f"J must be {p}x{m}")
        G_e = tuple(tuple(_parse_vec(r, n, f"G[{i}]")) for i, r in enumerate(G))
        J_e = tuple(tuple(_parse_vec(r, n, f"J[{i}]")) for i, r in enumerate(J))
        B = np.zeros((n, m)) if B is None else np.asarray(B, dtype=float).reshape(n, m)
        D = np.zeros((p, m)) if D is None else np.asarray(D, dtype=float).reshape(p, m)
        model = cls(n, m, p, tuple(f_e), G_e, tuple(h_e), J_e, B, D, name)
        model.validate(check_origin=check_origin)
        return model

    # -- validation ---------------------------------------------------------
    def validate(self, check_origin: bool = True, tol: float = 1e-12):
        if len(self.f) != self.n or len(self.h) != self.p:
            raise ModelError("f must have n entries and h must have p entries")
        if self.B.shape != (self.n, self.m) or self.D.shape != (self.p, self.m):
            raise ModelError("B must be n x m and D must be p x m")
        if not check_origin:
            return
        z = np.zeros(self.n)
        checks = [("f", self.f_at(z)), ("G", self.G_at(z)), ("h", self.h_at(z)), ("J", self.J_at(z))]
        for name, val in checks:
            if np.max(np.abs(val), initial=0.0) > tol:
                raise ModelError(f"{name}(0) must vanish (got {np.ravel(val).tolist()})")

    def check_region(self, box):
        """Reject expressions whose denominators may vanish on ``box``."""
        for e in self.all_expressions():
            try:
                interval_range(e, box)
            except ExpressionDomainError as exc:
                raise ModelError(f"expression {e} is not defined on the region: {exc}") from exc

    def all_expressions(self):
        yield from self.f
        yield from self.h
        for row in self.G:
            yield from row
        for row in self.J:
            yield from row

    # -- evaluation ---------------------------------------------------------
    @staticmethod
    def _vec(exprs, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return np.array([evaluate(e, x) for e in exprs])
        if len(exprs) == 0:
            return np.zeros((x.shape[0], 0))
        return np.stack([evaluate(e, x) for e in exprs], axis=-1)

    def f_at(self, x):
        return self._vec(self.f, x)

    def h_at(self, x):
        return self._vec(self.h, x)

    def G_at(self, x):
        """``G(x)``, shape ``(n, m)`` or ``(N, n, m)``."""
        flat = self._vec([e for row in self.G for e in row], x)
        return flat.reshape(flat.shape[:-1] + (self.n, self.m))

    def J_at(self, x):
        flat = self._vec([e for row in self.J for e in row], x)
        return flat.reshape(flat.shape[:-1] + (self.p, self.m))

    def Gbar_at(self, x):
        return self.B + self.G_at(x)

    def Jbar_at(self, x):
        return self.D + self.J_at(x)

    def rhs(self, x, u):
        """State derivative for batched ``x`` ``(N, n)`` and ``u`` ``(N, m)``."""
        return self.f_at(x) + np.einsum("...ij,...j->...i", self.Gbar_at(x), u)

    def output(self, x, u):
        return self.h_at(x) + np.einsum("...ij,...j->...i", self.Jbar_at(x), u)

    # -- derivatives --------------------------------------------------------
    def jacobian_exprs(self, exprs):
        return [[differentiate(e, i) for i in range(self.n)] for e in exprs]

    def jacobian_at(self, exprs, x):
        """Jacobian of a list of expressions at a single point."""
        rows = self.jacobian_exprs(exprs)
        x = np.asarray(x, dtype=float)
        return np.array([[evaluate(d, x) for d in row] for row in rows]).reshape(len(exprs), self.n)

    @cached_property
    def hessians(self):
        """Second partials of every field element, keyed by ``(field, index)``."""
        out = {}
        for i, e in enumerate(self.f):
            out[("f", i)] = hessian_exprs(e, self.n)
        for a, e in enumerate(self.h):
            out[("h", a)] = hessian_exprs(e, self.n)
        for i in range(self.n):
            for k in range(self.m):
                out[("G", i, k)] = hessian_exprs(self.G[i][k], self.n)
        for a in range(self.p):
            for k in range(self.m):
                out[("J", a, k)] = hessian_exprs(self.J[a][k], self.n)
        return out

    @property
    def has_affine_terms(self) -> bool:
        return bool(np.any(self.B != 0.0) or np.any(self.D != 0.0))

    def describe(self) -> dict:
        return {
            "name": self.name, "n": self.n, "m": self.m, "p": self.p,
            "f": [str(e) for e in self.f], "h": [str(e) for e in self.h],
            "G": [[str(e) for e in r] for r in self.G], "J": [[str(e) for e in r] for r in self.J],
            "B": self.B.tolist(), "D": self.D.tolist(),
        }

    @classmethod
    def from_description(cls, d: dict, check_origin: bool = True):
        return cls.from_strings(d["n"], d["m"], d["p"], d["f"], d["h"], G=d.get("G"), J=d.get("J"),
                                B=d.get("B"), D=d.get("D"), name=d.get("name", "model"),
                                check_origin=check_origin)
