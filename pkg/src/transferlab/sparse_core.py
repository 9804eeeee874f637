"""Sparse row-stochastic matrices and the eigen/linear solvers built on them.

Conventions: ``P[i, j]`` is the fraction of cell ``i`` sent to cell ``j``,
so densities evolve by ``v -> P.T @ v`` ("right" side) and functionals by
``phi -> P @ phi`` ("left" side).  Densities are normalised so that
``sum(v) / n == 1``.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "ConvergenceError",
    "SingularSystemError",
    "TransferMatrix",
    "SpectralData",
    "DEFAULT_EIG_TOL",
    "power_method",
    "solve_bordered",
    "spectral_gap_probe",
    "write_matrix_market",
    "read_matrix_market",
    "write_vector_csv",
    "read_vector_csv",
]

DEFAULT_EIG_TOL = 5e-12
STOCHASTIC_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """An iteration hit its limit; ``last`` holds the final iterate."""

    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class TransferMatrix:
    """Ulam matrix in CSR form with the partition it was built on.

    Parameters
    ----------
    matrix : scipy.sparse.csr_matrix
        Square, nonnegative, rows summing to one.
    partition : object
        Partition descriptor (``Partition1D`` or ``CubePartition``), or None.
    meta : dict
        Free-form provenance (map name, parameters, assembly mode, seed).
    """

    matrix: sp.csr_matrix
    partition: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=float)
        m.sum_duplicates()
        m.sort_indices()
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"transfer matrix must be square, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def row_normalizer(self) -> np.ndarray:
        """Measure of each source cell."""
        return np.full(self.n, 1.0 / self.n)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def check_stochastic(self, tol: float = STOCHASTIC_TOL) -> None:
        if self.matrix.nnz and self.matrix.data.min() < 0:
            raise ValueError("transfer matrix has negative entries")
        dev = np.max(np.abs(self.row_sums() - 1.0)) if self.n else 0.0
        if dev > tol:
            raise ValueError(f"rows do not sum to 1 (max deviation {dev:.3e})")

    def nnz_per_row(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def submatrix(self, cells) -> sp.csr_matrix:
        idx = np.asarray(cells, dtype=int)
        return self.matrix[idx][:, idx].tocsr()

    @classmethod
    def from_triplets(cls, rows, cols, vals, n, partition=None, meta=None, normalize=True):
        m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        m.sum_duplicates()
        m.eliminate_zeros()
        if normalize:
            m = normalize_rows(m)
        return cls(m, partition, dict(meta or {}))


def normalize_rows(m: sp.csr_matrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=float, copy=True)
    sums = np.asarray(m.sum(axis=1)).ravel()
    if np.any(sums <= 0):
        bad = int(np.flatnonzero(sums <= 0)[0])
        raise ValueError(f"row {bad} has no mass; cannot normalise")
    m.data /= np.repeat(sums, np.diff(m.indptr))
    return m


def _as_operator(M):
    if isinstance(M, TransferMatrix):
        return M.matrix
    if sp.issparse(M):
        return M.tocsr()
    return np.asarray(M, dtype=float)


@dataclass
class SpectralData:
    """Leading eigenpair estimate.

    ``right`` is normalised to ``sum(right) / n == 1``; when both sides are
    present ``left @ right / n == 1``.
    """

    lam: float
    right: np.ndarray | None = None
    left: np.ndarray | None = None
    iterations: int = 0
    residual: float = float("nan")
    lam_left: float | None = None

    @property
    def n(self) -> int:
        vec = self.right if self.right is not None else self.left
        return len(vec)


def power_method(
    M,
    v0=None,
    side: str = "right",
    tol: float = DEFAULT_EIG_TOL,
    max_iter: int = 100_000,
) -> SpectralData:
    """Leading eigenpair of a nonnegative matrix by sum-normalised iteration.

    The right (density) side iterates ``w <- M.T @ w``, the left side
    ``w <- M @ w``.  Each step divides by the sum of the iterate, and that
    sum is the eigenvalue estimate.  Iteration stops once successive
    estimates differ by at most ``tol * max(1, |lambda|)`` *and* the
    sum-normalised iterates differ by at most ``tol`` in the 1-norm.  The
    second test matters for stochastic matrices, whose iterate sums are
    exactly 1 from the first step on.

    Parameters
    ----------
    M : TransferMatrix, sparse matrix or ndarray
    v0 : array_like, optional
        Starting vector with positive sum; defaults to all ones.
    side : {"right", "left"}
    tol : float
    max_iter : int

    Returns
    -------
    SpectralData
        Only the requested side is filled.  Right vectors are scaled to
        ``sum == n``; left vectors keep the iteration scaling
        (``sum == n`` as well).

    Raises
    ------
    ConvergenceError
        If ``max_iter`` is exceeded.
    ValueError
        If the iterate sum is zero, negative or not finite.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if side not in ("right", "left"):
        raise ValueError("side must be 'right' or 'left'")
    A = _as_operator(M)
    op = A.T.tocsr() if (side == "right" and sp.issparse(A)) else (A.T if side == "right" else A)
    n = A.shape[0]
    w = np.ones(n) if v0 is None else np.array(v0, dtype=float, copy=True)
    s0 = w.sum()
    if not (np.isfinite(s0) and s0 > 0):
        raise ValueError("starting vector must have positive sum")
    w = w / s0
    lam_old = np.inf
    it = 0
    while True:
        w1 = op @ w
        lam = w1.sum()
        it += 1
        if not (np.isfinite(lam) and lam > 0):
            raise ValueError(
                f"iterate sum became {lam!r}; the matrix is not positive as this solver requires"
            )
        w1 /= lam
        inc = abs(lam - lam_old)
        dvec = np.abs(w1 - w).sum()
        if inc <= tol * max(1.0, abs(lam)) and dvec <= tol:
            break
        if it >= max_iter:
            raise ConvergenceError(
                f"power method did not converge in {max_iter} iterations "
                f"(eigenvalue increment {inc:.3e}, vector increment {dvec:.3e})",
                last=w1 * n,
            )
        lam_old = lam
        w = w1
    vec = w1 * n
    if side == "right":
        return SpectralData(float(lam), right=vec, iterations=it, residual=float(inc))
    return SpectralData(float(lam), left=vec, iterations=it, residual=float(inc))


# above this size sparse LU fill-in on expanding-map graphs dominates; use GMRES
LU_MAX_N = 2000


def _border(A, col, row) -> sp.csc_matrix:
    n = A.shape[0]
    top = sp.hstack([A, sp.csr_matrix(np.asarray(col, dtype=float).reshape(n, 1))])
    bottom = sp.hstack([sp.csr_matrix(np.asarray(row, dtype=float).reshape(1, n)), sp.csr_matrix((1, 1))])
    return sp.vstack([top, bottom]).tocsc()


def _bordered_matrix(M, v) -> sp.csc_matrix:
    A = sp.csr_matrix(_as_operator(M))
    n = A.shape[0]
    return _border(A.T - sp.identity(n, format="csr"), -np.asarray(v, dtype=float), np.ones(n))


def solve_bordered(M, v, rhs, method: str = "auto") -> tuple[np.ndarray, float]:
    """Solve ``[[M.T - I, -v], [1^T, 0]] @ (dv, dlam) = (rhs, 0)``.

    The last row forces ``sum(dv) == 0``.  ``method`` is ``"lu"`` (sparse
    LU plus one refinement step when the residual exceeds
    ``1e-10 * max(1, |rhs|_inf)``), ``"gmres"`` (deflated iterative solve,
    see :func:`solve_bordered_general`), or ``"auto"``, which picks LU up
    to ``LU_MAX_N`` cells.

    Raises
    ------
    SingularSystemError
        If the bordered matrix is singular, which happens when the
        eigenvalue 1 of ``M`` is not simple at this resolution.
    """
    rhs = np.asarray(rhs, dtype=float)
    v = np.asarray(v, dtype=float)
    n = rhs.shape[0]
    A = sp.csr_matrix(_as_operator(M))
    if A.shape[0] != n:
        raise ValueError("rhs length does not match the matrix")
    method = _pick(method, n)
    if method == "lu":
        y = _lu_solve(_bordered_matrix(A, v), np.append(rhs, 0.0))
        return y[:n], float(y[n])
    # same system as [[I - M.T, v], [1^T / n, 0]] (dv, dlam) = (-rhs, 0)
    dv, dlam = _deflated_solve(A, 1.0, v, np.ones(n), -rhs)
    res = A.T @ dv - dv - v * dlam - rhs
    scale = max(1.0, np.max(np.abs(rhs)))
    if np.max(np.abs(res)) > 1e-10 * scale or abs(dv.sum()) > 1e-10 * scale * n:
        raise _singular()
    return dv, dlam


def solve_bordered_general(A, lam, v, phi, rhs, method: str = "auto") -> np.ndarray:
    """Solve ``(lam - A.T) u = rhs`` subject to ``phi @ u == 0``.

    Uses the bordered matrix ``[[I - A.T / lam, v], [phi^T / n, 0]]``
    (scaled by ``1/lam``); when ``phi @ rhs == 0`` the border unknown
    vanishes and ``u`` is the reduced-resolvent image of ``rhs``.

    The iterative route eliminates the border: applying ``phi`` to the
    first block row gives the border unknown directly, and the rest is
    ``(I - A.T / lam + v phi^T / n) u = rhs / lam - mu v``, whose operator
    is nonsingular with eigenvalues ``1 - lam_k / lam`` plus 1.
    """
    A = sp.csr_matrix(_as_operator(A))
    n = A.shape[0]
    rhs = np.asarray(rhs, dtype=float)
    v = np.asarray(v, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if _pick(method, n) == "lu":
        K = _border(sp.identity(n, format="csr") - A.T / lam, v, phi / n)
        return _lu_solve(K, np.append(rhs / lam, 0.0))[:n]
    u, mu = _deflated_solve(A, lam, v, phi, rhs / lam)
    res = u - (A.T @ u) / lam + v * mu - rhs / lam
    scale = max(1.0, np.max(np.abs(rhs / lam)))
    if np.max(np.abs(res)) > 1e-10 * scale or abs(phi @ u) > 1e-10 * scale * n:
        raise _singular()
    return u


def _pick(method, n):
    if method == "auto":
        return "lu" if n <= LU_MAX_N else "gmres"
    if method not in ("lu", "gmres"):
        raise ValueError(f"unknown solve method {method!r}")
    return method


def _singular(exc=None):
    err = SingularSystemError(
        "bordered system is singular; check the spectral gap of the matrix "
        "(the leading eigenvalue may not be simple at this resolution)"
    )
    if exc is not None:
        err.__cause__ = exc
    return err


def _lu_solve(K, b):
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
            y = lu.solve(b)
        except (RuntimeError, spla.MatrixRankWarning) as exc:
            raise _singular(exc)
    if not np.all(np.isfinite(y)):
        raise _singular()
    scale = max(1.0, np.max(np.abs(b)))
    r = b - K @ y
    if np.max(np.abs(r)) > 1e-10 * scale:
        y = y + lu.solve(r)
        if np.max(np.abs(b - K @ y)) > 1e-6 * scale:
            raise _singular()
    return y


def _deflated_solve(A, lam, v, phi, b, rounds: int = 3):
    """``[[I - A.T / lam, v], [phi^T / n, 0]] (u, mu) = (b, 0)`` by GMRES."""
    n = A.shape[0]
    pv = float(phi @ v)
    if pv == 0 or not np.isfinite(pv):
        raise _singular()
    mu = float(phi @ b) / pv
    At = A.T.tocsr()

    def matvec(x):
        return x - (At @ x) / lam + v * (phi @ x) / n

    op = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
    rhs = b - mu * v
    scale = max(1.0, np.max(np.abs(rhs)))
    u = np.zeros(n)
    r = rhs.copy()
    for _ in range(rounds):
        du, info = spla.gmres(op, r, rtol=1e-14, atol=1e-15 * scale, restart=100, maxiter=20)
        if info < 0 or not np.all(np.isfinite(du)):
            raise _singular()
        u = u + du
        r = rhs - matvec(u)
        if np.max(np.abs(r)) <= 1e-12 * scale:
            break
    return u, mu


def spectral_gap_probe(
    M,
    tol: float = 1e-10,
    max_iter: int = 1000,
    eig_tol: float = DEFAULT_EIG_TOL,
) -> float:
    """Estimate ``|lambda_2|`` of a row-stochastic matrix.

    The leading eigendirection is projected out of the density-side
    operator (``w -> D(M.T w)`` with ``D w = w - (sum(w) / n) v``) and the
    largest-modulus eigenvalue of what remains is found with ARPACK, which
    copes with complex pairs.  Small matrices use a dense eigensolver.  A
    value within ``1e-8`` of 1 means there is no gap, and a
    ``RuntimeWarning`` is issued.
    """
    A = _as_operator(M)
    n = A.shape[0]
    if n == 1:
        return 0.0
    v = power_method(A, side="right", tol=eig_tol).right
    if n <= 64:
        dense = A.toarray() if sp.issparse(A) else np.asarray(A)
        D = np.eye(n) - np.outer(v, np.ones(n)) / n
        est = float(np.max(np.abs(np.linalg.eigvals(D @ dense.T))))
    else:
        op_t = A.T.tocsr() if sp.issparse(A) else A.T

        def matvec(w):
            y = op_t @ (w - (w.sum() / n) * v)
            return y - (y.sum() / n) * v

        op = spla.LinearOperator((n, n), matvec=matvec, dtype=float)
        # deterministic start with no symmetry: spreads over all modes
        w0 = np.cos(np.arange(1, n + 1) * 0.7548776662) + np.linspace(-1, 1, n)
        try:
            ev = spla.eigs(
                op, k=3, ncv=min(n - 1, 24), which="LM", tol=tol, maxiter=max_iter, v0=w0, return_eigenvectors=False
            )
            est = float(np.max(np.abs(ev)))
        except spla.ArpackNoConvergence as exc:
            # clustered moduli (e.g. permutations): fall back to the growth rate of the deflated iterates
            w = matvec(w0)
            logs = 0.0
            steps = 200
            for _ in range(steps):
                nrm = np.linalg.norm(w)
                if nrm == 0.0:
                    return 0.0
                w = matvec(w / nrm)
                logs += math.log(np.linalg.norm(w))
            est = math.exp(logs / steps)
            if not np.isfinite(est):
                raise ConvergenceError(f"spectral gap probe did not converge: {exc}") from exc
    if est >= 1.0 - 1e-8:
        warnings.warn("no spectral gap: |lambda_2| is numerically 1", RuntimeWarning, stacklevel=2)
    return est


def write_matrix_market(path, P: TransferMatrix | sp.spmatrix, comment: str = "") -> None:
    m = P.matrix if isinstance(P, TransferMatrix) else sp.csr_matrix(P)
    scipy.io.mmwrite(str(path), m.tocoo(), comment=comment, field="real", precision=17, symmetry="general")


def read_matrix_market(path, partition=None, meta=None) -> TransferMatrix:
    m = scipy.io.mmread(str(path))
    return TransferMatrix(sp.csr_matrix(m), partition, dict(meta or {}))


def write_vector_csv(path, vec) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for x in np.asarray(vec, dtype=float):
            w.writerow([f"{x:.17g}"])


def read_vector_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        return np.array([float(r[0]) for r in csv.reader(fh) if r])
