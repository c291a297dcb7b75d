"""Hot loops of the interior-point solver, in numba and in plain numpy.

The numba implementations are used when numba imports and the environment
variable ``DISSIPA_DISABLE_NUMBA`` is unset or ``0``.  Both paths compute
the same quantities; the benchmark in ``benchmarks/bench_kernels.py``
compares them.

Block data layout (one group of ``K`` blocks of size ``s`` with ``v``
variable slots each):

* ``A``   -- coefficients, shape ``(K, v, s, s)``
* ``idx`` -- variable index per slot, shape ``(K, v)``
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap(args[0]) if args and callable(args[0]) else wrap

__all__ = ["USE_NUMBA", "schur_values", "adjoint", "forward", "schur_values_numpy",
           "schur_values_numba", "adjoint_numpy", "adjoint_numba", "forward_numpy",
           "forward_numba", "numba_available"]


def numba_available() -> bool:
    return _HAVE_NUMBA


def _flag() -> bool:
    return os.environ.get("DISSIPA_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and _flag()


# -- numpy reference ------------------------------------------------------------

def schur_values_numpy(A, W, pos, nnz):
    """Values of ``H_ab = <A_a, W A_b W>`` scattered to CSC positions ``pos``."""
    T = W[:, None] @ A @ W[:, None]
    loc = np.einsum("kaij,kbij->kab", A, T)
    return np.bincount(pos.ravel(), weights=loc.ravel(), minlength=nnz)


def adjoint_numpy(A, idx, X, N):
    """``A(X)_i = sum_blocks <A_{b,i}, X_b>``."""
    loc = np.einsum("kvij,kij->kv", A, X)
    return np.bincount(idx.ravel(), weights=loc.ravel(), minlength=N)


def forward_numpy(A, idx, y):
    """``sum_i y_i A_{b,i}`` per block."""
    return np.einsum("kv,kvij->kij", y[idx], A)


# -- numba -----------------------------------------------------------------------

@njit(cache=True)
def _schur_nb(A, W, pos, out):
    K, v, s, _ = A.shape
    U = np.empty((s, s))
    T = np.empty((s, s))
    for k in range(K):
        for a in range(v):
            # T = W A_a W
            for i in range(s):
                for j in range(s):
                    acc = 0.0
                    for l in range(s):
                        acc += A[k, a, i, l] * W[k, l, j]
                    U[i, j] = acc
            for i in range(s):
                for j in range(s):
                    acc = 0.0
                    for l in range(s):
                        acc += W[k, i, l] * U[l, j]
                    T[i, j] = acc
            for b in range(a, v):
                acc = 0.0
                for i in range(s):
                    for j in range(s):
                        acc += T[i, j] * A[k, b, i, j]
                out[pos[k, a, b]] += acc
                if b != a:
                    out[pos[k, b, a]] += acc
    return out


@njit(cache=True)
def _adjoint_nb(A, idx, X, out):
    K, v, s, _ = A.shape
    for k in range(K):
        for a in range(v):
            acc = 0.0
            for i in range(s):
                for j in range(s):
                    acc += A[k, a, i, j] * X[k, i, j]
            out[idx[k, a]] += acc
    return out


@njit(cache=True)
def _forward_nb(A, idx, y, out):
    K, v, s, _ = A.shape
    for k in range(K):
        for a in range(v):
            ya = y[idx[k, a]]
            if ya != 0.0:
                for i in range(s):
                    for j in range(s):
                        out[k, i, j] += ya * A[k, a, i, j]
    return out


def schur_values_numba(A, W, pos, nnz):
    return _schur_nb(A, W, pos, np.zeros(nnz))


def adjoint_numba(A, idx, X, N):
    return _adjoint_nb(A, idx, X, np.zeros(N))


def forward_numba(A, idx, y):
    K, _, s, _ = A.shape
    return _forward_nb(A, idx, y, np.zeros((K, s, s)))


if USE_NUMBA:
    schur_values = schur_values_numba
    adjoint = adjoint_numba
    forward = forward_numba
else:
    schur_values = schur_values_numpy
    adjoint = adjoint_numpy
    forward = forward_numpy
