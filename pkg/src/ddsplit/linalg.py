"""Sparse SPD linear algebra: CSR wrappers, PCG, cached factorizations,
Gram-matrix inner products.

Everything downstream (energy norms, harmonic lifts, proximal maps) funnels
through this module, so solves here are deterministic: fixed-order numpy
reductions, no randomized pivoting options.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_TOL = 1e-12


class SolverFailure(RuntimeError):
    """An inner solve (linear or nonlinear) missed its tolerance.

    Carries the final relative residual so callers can report how close the
    solve got before giving up.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


def require_finite(name: str, v: np.ndarray) -> np.ndarray:
    """Reject NaN/Inf at API boundaries."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


class SparseSpd:
    """Symmetric positive-definite sparse matrix (CSR).

    Symmetry is checked exactly at construction; assembly routines place both
    triangles from the same local values, so the check is bitwise. Positive
    definiteness is a property of the assembly (stiffness plus optional mass
    shift) and surfaces as a :class:`SolverFailure` if violated.
    """

    def __init__(self, matrix):
        m = sp.csr_matrix(matrix).astype(float)
        m.sum_duplicates()
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"matrix must be square, got shape {m.shape}")
        if (m != m.T).nnz != 0:
            raise ValueError("matrix is not symmetric")
        self.matrix = m
        self.dim = m.shape[0]
        self._diag = m.diagonal()
        if self.dim and np.any(self._diag <= 0.0):
            raise ValueError("matrix has a nonpositive diagonal entry; not SPD")

    @property
    def diagonal(self) -> np.ndarray:
        return self._diag

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def spd_solve(
    A: SparseSpd,
    b: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
    x0: np.ndarray | None = None,
) -> np.ndarray:
    """Solve ``A x = b`` by Jacobi-preconditioned conjugate gradients.

    Parameters
    ----------
    A : SparseSpd
    b : array
        Right-hand side; ``b = 0`` returns the exact zero vector.
    tol : float
        Relative residual target ``||b - A x|| <= tol * ||b||``.
    max_iter : int, optional
        Iteration cap, default ``10 * dim``.
    x0 : array, optional
        Warm start.

    Raises
    ------
    SolverFailure
        If the cap is hit; the exception carries the final relative residual.
    """
    b = require_finite("rhs", b)
    if b.shape != (A.dim,):
        raise ValueError(f"rhs has shape {b.shape}, expected ({A.dim},)")
    if not b.any():
        return np.zeros(A.dim)
    cap = 10 * A.dim if max_iter is None else int(max_iter)
    M = A.matrix
    inv_diag = 1.0 / A.diagonal
    x = np.zeros(A.dim) if x0 is None else np.array(x0, dtype=float)
    bnorm = float(np.linalg.norm(b))

    for _attempt in range(2):
        r = b - M @ x
        z = inv_diag * r
        p = z.copy()
        rz = float(r @ z)
        for _ in range(cap):
            rnorm = float(np.linalg.norm(r))
            if rnorm <= tol * bnorm:
                break
            Ap = M @ p
            pAp = float(p @ Ap)
            if pAp <= 0.0:
                raise SolverFailure(
                    "conjugate gradients met a nonpositive curvature direction; "
                    "matrix is not SPD",
                    residual=rnorm / bnorm,
                )
            alpha = rz / pAp
            x += alpha * p
            r -= alpha * Ap
            z = inv_diag * r
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        # The recursive residual can drift; accept only if the true residual
        # agrees, otherwise restart once from the current iterate.
        true_res = float(np.linalg.norm(b - M @ x))
        if true_res <= 10.0 * tol * bnorm:
            return x
    raise SolverFailure(
        f"PCG did not reach tol={tol:g} within {cap} iterations",
        residual=true_res / bnorm,
    )


class SpdFactorization:
    """Cached sparse LU of an SPD matrix, with a PCG fallback.

    Built once per subdomain and reused for every harmonic lift, so the
    factorization cost is amortized across the whole outer iteration. One
    step of iterative refinement keeps residuals near machine precision,
    which the adjoint-identity checks rely on.
    """

    def __init__(self, A: SparseSpd):
        self.A = A
        try:
            self._lu = spla.splu(A.matrix.tocsc())
        except RuntimeError:
            self._lu = None

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = require_finite("rhs", b)
        if b.shape != (self.A.dim,):
            raise ValueError(f"rhs has shape {b.shape}, expected ({self.A.dim},)")
        if not b.any():
            return np.zeros(self.A.dim)
        if self._lu is None:
            return spd_solve(self.A, b)
        x = self._lu.solve(b)
        # Guarded iterative refinement: for ill-conditioned Grams (floating
        # subdomains) the computed residual is itself noisy, so corrections
        # are kept only while they actually shrink the residual.
        M = self.A.matrix
        r = b - M @ x
        best = float(np.linalg.norm(r))
        target = 1e-13 * (1.0 + float(np.linalg.norm(b)))
        for _ in range(4):
            if best <= target:
                break
            x_try = x + self._lu.solve(r)
            r_try = b - M @ x_try
            n_try = float(np.linalg.norm(r_try))
            if n_try < 0.5 * best:
                x, r, best = x_try, r_try, n_try
            else:
                break
        return x


@dataclass(frozen=True)
class InnerProductSpace:
    """Real Hilbert space on R^dim with Gram matrix ``gram``."""

    gram: SparseSpd

    @property
    def dim(self) -> int:
        return self.gram.dim

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if u.shape != (self.dim,) or v.shape != (self.dim,):
            raise ValueError(
                f"vectors of shape {u.shape}, {v.shape} do not live in a "
                f"{self.dim}-dimensional space"
            )
        return float(u @ (self.gram.matrix @ v))

    def norm_sq(self, u: np.ndarray) -> float:
        # Clamp the roundoff-negative case so sqrt never sees -1e-30.
        return max(self.inner(u, u), 0.0)

    def norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(self.norm_sq(u)))
