"""Sparse assembly, solves and M-matrix diagnostics.

Matrices are plain ``scipy.sparse.csr_matrix`` objects; this module only adds
deterministic assembly, residual-checked solves and structural checks.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolveError(RuntimeError):
    """Linear solve failed; ``residual`` holds the achieved relative residual."""

    def __init__(self, message, residual=np.nan):
        super().__init__(message)
        self.residual = residual


def assemble(triplets, shape) -> sp.csr_matrix:
    """Build a CSR matrix from ``(row, col, value)`` triplets, summing duplicates.

    ``triplets`` may be a sequence of 3-tuples or a tuple of three arrays.
    """
    nrows, ncols = shape
    if isinstance(triplets, tuple) and len(triplets) == 3 and np.ndim(triplets[0]) == 1:
        rows, cols, vals = (np.asarray(a) for a in triplets)
    else:
        arr = list(triplets)
        if not arr:
            return sp.csr_matrix(shape, dtype=float)
        rows, cols, vals = (np.asarray(a) for a in zip(*arr))
    rows = rows.astype(np.int64)
    cols = cols.astype(np.int64)
    vals = vals.astype(float)
    if rows.size and (rows.min() < 0 or rows.max() >= nrows or cols.min() < 0 or cols.max() >= ncols):
        raise IndexError(f"triplet index out of range for shape {shape}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite matrix entry")
    mat = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def residual_norm(A, x, b):
    r = A @ x - b
    nb = np.linalg.norm(b)
    return np.linalg.norm(r) / (nb if nb > 0 else 1.0)


def solve(A, b, method="direct", tol=1e-12, max_iter=None):
    """Solve ``A x = b`` and verify ``||Ax - b|| <= tol ||b||``.

    ``method`` is ``"direct"`` (sparse LU) or ``"bicgstab"`` (ILU-preconditioned).
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise ValueError(f"incompatible shapes {A.shape} and {b.shape}")
    if not np.any(b):
        return np.zeros_like(b)
    if method == "direct":
        try:
            x = spla.splu(A.tocsc()).solve(b)
        except RuntimeError as exc:
            raise SolveError(f"sparse LU failed: {exc}") from exc
    elif method == "bicgstab":
        try:
            ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20)
            M = spla.LinearOperator(A.shape, ilu.solve)
        except RuntimeError:
            M = None
        x, info = spla.bicgstab(A, b, rtol=tol, atol=0.0, maxiter=max_iter or 10 * A.shape[0], M=M)
        if info != 0:
            raise SolveError(f"bicgstab did not converge (info={info})", residual_norm(A, x, b))
    else:
        raise ValueError(f"unknown method {method!r}")
    res = residual_norm(A, x, b)
    if not res <= max(tol, 1e3 * np.finfo(float).eps):
        raise SolveError(f"residual {res:.3e} above tolerance {tol:.1e}", res)
    return x


class Factorized:
    """Reusable sparse LU factorization of a fixed matrix."""

    def __init__(self, A):
        self.A = sp.csc_matrix(A)
        try:
            self._lu = spla.splu(self.A)
        except RuntimeError as exc:
            raise SolveError(f"sparse LU failed: {exc}") from exc

    def solve(self, b, trans=False):
        return self._lu.solve(np.asarray(b, dtype=float), trans="T" if trans else "N")


@dataclass
class MMatrixReport:
    is_m_matrix: bool
    strictly_diagonally_dominant: bool
    nonpositive_diagonal: list = field(default_factory=list)
    positive_offdiagonal: list = field(default_factory=list)
    not_dominant_rows: list = field(default_factory=list)


def check_m_matrix(A, max_report=20) -> MMatrixReport:
    """Sufficient M-matrix test: positive diagonal, nonpositive off-diagonal
    entries and strict row diagonal dominance."""
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    coo = A.tocoo()
    diag = A.diagonal()
    off = coo.row != coo.col
    pos_off = off & (coo.data > 0)
    offsum = np.bincount(coo.row[off], weights=np.abs(coo.data[off]), minlength=A.shape[0])
    bad_diag = np.flatnonzero(diag <= 0)
    bad_rows = np.flatnonzero(offsum >= diag)
    report = MMatrixReport(
        is_m_matrix=bool(bad_diag.size == 0 and not pos_off.any() and bad_rows.size == 0),
        strictly_diagonally_dominant=bool(bad_rows.size == 0),
        nonpositive_diagonal=bad_diag[:max_report].tolist(),
        positive_offdiagonal=list(zip(coo.row[pos_off][:max_report].tolist(),
                                      coo.col[pos_off][:max_report].tolist())),
        not_dominant_rows=bad_rows[:max_report].tolist(),
    )
    return report
