"""Dense linear-algebra kernels used by every other module.

All routines operate on plain float64 ndarrays and are pure functions of
their inputs, so they are safe to call concurrently.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, SingularMatrixError, StabilityError

#: Condition-number ceiling beyond which a solve is refused.
COND_LIMIT = 1e12

#: Symmetry tolerance used before symmetric eigensolves.
SYMMETRY_TOL = 1e-12


def as_matrix(M, name="matrix"):
    """Validate and return ``M`` as a finite 2-D float64 array."""
    A = np.asarray(M, dtype=float)
    if A.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={A.ndim}")
    if A.size == 0:
        raise DimensionError(f"{name} must be nonempty")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return A


def as_vector(v, name="vector"):
    """Validate and return ``v`` as a finite 1-D float64 array."""
    x = np.asarray(v, dtype=float)
    if x.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got ndim={x.ndim}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return x


def require_square(M, name="matrix"):
    A = as_matrix(M, name)
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    return A


def spectral_norm(M) -> float:
    """Largest singular value (operator 2-norm) of ``M``."""
    A = as_matrix(M, "M")
    return float(np.linalg.norm(A, 2))


def sym_eigenvalues(M, tol: float = SYMMETRY_TOL):
    """Eigenvalues of a symmetric matrix, sorted in nonincreasing order.

    ``M`` must be symmetric up to ``tol``; it is symmetrized as
    ``(M + M^T)/2`` before solving to strip accumulation noise from
    upstream products.
    """
    A = require_square(M, "M")
    scale = max(1.0, float(np.abs(A).max()))
    if np.abs(A - A.T).max() > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    A = 0.5 * (A + A.T)
    vals = np.linalg.eigvalsh(A)
    return vals[::-1].copy()


def solve_linear(M, b, cond_limit: float = COND_LIMIT):
    """Solve ``M x = b`` for square nonsingular ``M``.

    ``b`` may be a vector or a matrix of stacked right-hand sides.  Refuses
    matrices whose 2-norm condition number exceeds ``cond_limit``.
    """
    A = require_square(M, "M")
    rhs = np.asarray(b, dtype=float)
    if rhs.shape[0] != A.shape[0]:
        raise DimensionError(
            f"right-hand side has leading dimension {rhs.shape[0]}, expected {A.shape[0]}"
        )
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularMatrixError(
            f"matrix is singular or near-singular (condition {cond:.3e})",
            condition=cond,
        )
    return np.linalg.solve(A, rhs)


def spectral_radius(A) -> float:
    """Spectral radius of a general (possibly nonsymmetric) square matrix."""
    M = require_square(A, "A")
    return float(np.abs(np.linalg.eigvals(M)).max())


def is_schur(A, margin: float = 1e-12):
    """Return ``(stable, radius)`` where stable means radius < 1 - margin.

    The verdict uses the true spectral radius from a general eigensolve;
    the 2-norm is only a cheap sufficient pre-check.
    """
    M = require_square(A, "A")
    if np.linalg.norm(M, 2) < 1.0 - margin:
        # norm bounds the radius; still report the exact value
        return True, spectral_radius(M)
    rho = spectral_radius(M)
    return rho < 1.0 - margin, rho


def solve_discrete_lyapunov(A, Q):
    """Solve ``A^T P A - P = -Q`` for symmetric positive definite ``P``.

    Uses the Kronecker-vectorized direct solve, which is exact and
    bit-stable for the moderate sizes used here (n <= a few hundred).
    ``A`` must be Schur stable and ``Q`` symmetric positive definite.
    """
    A = require_square(A, "A")
    Q = require_square(Q, "Q")
    if A.shape != Q.shape:
        raise DimensionError(f"A and Q must match, got {A.shape} vs {Q.shape}")
    stable, rho = is_schur(A)
    if not stable:
        raise StabilityError(
            f"A is not Schur stable (spectral radius {rho:.6g})", spectral_radius=rho
        )
    qvals = sym_eigenvalues(Q)
    if qvals[-1] <= 0:
        raise ValueError(f"Q must be positive definite (min eigenvalue {qvals[-1]:.3e})")
    n = A.shape[0]
    lhs = np.eye(n * n) - np.kron(A.T, A.T)
    P = np.linalg.solve(lhs, Q.reshape(-1)).reshape(n, n)
    P = 0.5 * (P + P.T)
    residual = np.linalg.norm(A.T @ P @ A - P + Q, "fro")
    if residual >= 1e-10 * max(1.0, np.linalg.norm(Q, "fro")):
        raise ValueError(f"Lyapunov solve residual too large ({residual:.3e})")
    return P
