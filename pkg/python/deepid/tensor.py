"""Dense float64 arrays and the linear algebra the rest of the package builds on.

A `Tensor` is a `numpy.ndarray` of dtype float64 whose values are finite; a `Matrix`
is a rank-2 `Tensor`. Construct them with `as_tensor` and `as_matrix`, which copy and
validate their input.
"""

from __future__ import annotations

from typing import Any, Iterator, TypeAlias

import numpy as np
import numpy.typing as npt
import scipy.linalg

from deepid.errors import (
    ConvergenceError,
    NonFiniteError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    ShapeError,
)

Tensor: TypeAlias = npt.NDArray[np.float64]
Matrix: TypeAlias = npt.NDArray[np.float64]

# Relative tolerance used for the symmetry precondition.
SYMMETRY_TOLERANCE = 1e-9

# Maximum number of Jacobi sweeps before giving up.
MAX_SWEEPS = 100


def as_tensor(
    data: Any,
    *,
    shape: tuple[int, ...] | None = None,
    allow_nonfinite: bool = False,
) -> Tensor:
    """Copy `data` into a float64 array, checking its shape and finiteness."""
    array = np.array(data, dtype=np.float64)
    if shape is not None:
        if array.size != int(np.prod(shape, dtype=np.int64)):
            raise ShapeError(
                f"cannot view {array.size} values as shape {tuple(shape)}"
            )
        array = array.reshape(shape)
    if not allow_nonfinite and not np.all(np.isfinite(array)):
        raise NonFiniteError("tensor contains NaN or infinite values")
    return array


def as_matrix(data: Any) -> Matrix:
    """Copy `data` into a rank-2 `Tensor`."""
    array = as_tensor(data)
    if array.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {array.shape}")
    return array


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def check_symmetric(m: Matrix) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m), initial=0.0)))
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOLERANCE * scale:
        raise NotSymmetricError("matrix is not symmetric")


def _round_robin(n: int) -> Iterator[tuple[npt.NDArray[np.intp], npt.NDArray[np.intp]]]:
    """Yield the `n - 1` rounds of a round-robin tournament over `n` indices.

    Each round pairs every index with exactly one other, so the rotations of one round
    touch disjoint rows and columns and may be applied together.
    """
    m = n + (n % 2)
    players = list(range(m))
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            # `n` is the bye when the size is odd.
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        yield np.asarray(p, dtype=np.intp), np.asarray(q, dtype=np.intp)
        players = [players[0], players[-1], *players[1:-1]]


def sym_eigendecompose(m: Matrix) -> tuple[Tensor, Matrix]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns the eigenvalues sorted in descending order and the matching orthonormal
    eigenvectors as columns, so that `m @ v ≈ v @ diag(w)`.
    """
    check_symmetric(m)
    n = m.shape[0]
    a = (np.array(m, dtype=np.float64) + np.array(m, dtype=np.float64).T) / 2.0
    v = np.eye(n)
    if n <= 1:
        return np.diag(a).copy(), v

    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), v
    tolerance = np.finfo(np.float64).eps * norm

    for _ in range(MAX_SWEEPS):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tolerance:
            break
        for p, q in _round_robin(n):
            apq = a[p, q]
            active = np.abs(apq) > tolerance / n
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c

            # a <- J^T a J, v <- v J, with J the product of the disjoint rotations.
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    else:
        raise ConvergenceError(
            f"Jacobi eigensolver did not converge after {MAX_SWEEPS} sweeps"
        )

    eigenvalues = np.diag(a).copy()
    order = np.argsort(-eigenvalues, kind="stable")
    return eigenvalues[order], v[:, order]


def _cholesky(m: Matrix) -> tuple[Matrix, bool]:
    check_symmetric(m)
    try:
        return scipy.linalg.cho_factor(m, lower=True, check_finite=True)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefiniteError(
            f"matrix is not positive definite: {err}"
        ) from None


def solve_spd(m: Matrix, rhs: Matrix) -> Matrix:
    """Solve `m @ x = rhs` for symmetric positive definite `m` via Cholesky."""
    if rhs.shape[0] != m.shape[0]:
        raise ShapeError(f"cannot solve {m.shape} system with right-hand side {rhs.shape}")
    factor = _cholesky(m)
    return scipy.linalg.cho_solve(factor, rhs)


def spd_inverse(m: Matrix) -> Matrix:
    """Inverse of a symmetric positive definite matrix, symmetrized."""
    inverse = solve_spd(m, np.eye(m.shape[0]))
    return (inverse + inverse.T) / 2.0


def spd_logdet(m: Matrix) -> float:
    """Log-determinant of a symmetric positive definite matrix."""
    lower, _ = _cholesky(m)
    return 2.0 * float(np.sum(np.log(np.diag(lower))))
