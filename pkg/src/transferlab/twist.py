"""Twisted Ulam matrices ``P_z[i, j] = P[i, j] * exp(z * g[i])`` and their
leading spectral data.

On the density side the twisted operator acts as ``v -> P.T @ (exp(z g) * v)``,
i.e. multiplication by ``exp(z g)`` followed by the transfer operator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .sparse_core import (
    DEFAULT_EIG_TOL,
    ConvergenceError,
    SpectralData,
    TransferMatrix,
    power_method,
    solve_bordered_general,
)
from .ulam import DiscretizedObservable

__all__ = [
    "TwistedMatrix",
    "TwistSpectralCurve",
    "DEFAULT_Z_MAX",
    "twist",
    "leading_eigendata",
    "lambda_prime",
    "lambda_second_general",
    "twist_curve",
]

DEFAULT_Z_MAX = 20.0
_EXP_LIMIT = 700.0


@dataclass(frozen=True, eq=False)
class TwistedMatrix:
    base: TransferMatrix
    g: DiscretizedObservable
    z: float

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        P = self.base.matrix
        weights = np.exp(self.z * self.g.values)
        out = P.copy()
        out.data = P.data * np.repeat(weights, np.diff(P.indptr))
        return out

    @property
    def n(self) -> int:
        return self.base.n


def twist(
    base: TransferMatrix,
    g: DiscretizedObservable,
    z: float,
    z_max: float = DEFAULT_Z_MAX,
) -> TwistedMatrix:
    """Row-scale ``base`` by ``exp(z * g[i])``; ``base`` is left untouched.

    Raises
    ------
    ValueError
        If ``|z| > z_max`` or ``g`` does not match the matrix size.
    OverflowError
        If ``exp(z * g)`` would overflow; use a smaller ``z``.
    """
    z = float(z)
    if g.n != base.n:
        raise ValueError(f"observable has {g.n} cells, matrix has {base.n}")
    if abs(z) > z_max:
        raise ValueError(f"|z| = {abs(z)} exceeds z_max = {z_max}")
    gmax = float(np.max(np.abs(g.values))) if g.n else 0.0
    if abs(z) * gmax > _EXP_LIMIT:
        raise OverflowError(f"exp(z g) overflows at z = {z} (max |g| = {gmax}); use a smaller z")
    return TwistedMatrix(base, g, z)


def leading_eigendata(
    tm: TwistedMatrix,
    warm_start: SpectralData | None = None,
    tol: float = DEFAULT_EIG_TOL,
    max_iter: int = 100_000,
) -> SpectralData:
    """Leading eigenvalue with right (density) and left (functional) vectors.

    Normalisation: ``sum(v) / n == 1`` and ``phi @ v / n == 1``.  The
    returned ``lam`` comes from the right iteration; ``residual`` is the
    larger of the two final eigenvalue increments.
    """
    v0 = phi0 = None
    if warm_start is not None:
        v0, phi0 = warm_start.right, warm_start.left
    try:
        right = power_method(tm.matrix, v0, side="right", tol=tol, max_iter=max_iter)
        left = power_method(tm.matrix, phi0, side="left", tol=tol, max_iter=max_iter)
    except ConvergenceError as exc:
        raise ConvergenceError(
            f"leading eigendata at z={tm.z} did not converge: {exc}; "
            "try a larger tolerance or a smaller |z|",
            last=exc.last,
        ) from exc
    n = tm.n
    v = right.right
    phi = left.left * (n / (left.left @ v))
    return SpectralData(
        lam=right.lam,
        right=v,
        left=phi,
        iterations=right.iterations + left.iterations,
        residual=max(right.residual, left.residual),
        lam_left=left.lam,
    )


def lambda_prime(tm: TwistedMatrix, sd: SpectralData) -> float:
    """Exact derivative ``lam'(z) = lam * phi(g v)`` of the discrete eigenvalue."""
    n = tm.n
    return float(sd.lam * (sd.left @ (tm.g.values * sd.right)) / n)


def lambda_second_general(tm: TwistedMatrix, sd: SpectralData, method: str = "auto") -> float:
    """Second derivative of the leading eigenvalue without finite differences.

    ``lam'' = lam phi(g^2 v) + 2 lam phi(g u)`` where ``u`` solves
    ``(lam - L_z) u = L_z (I - Pi) (g v)`` on ``ker phi``, ``L_z`` being the
    twisted operator on densities and ``Pi f = phi(f) v``.
    """
    n = tm.n
    g, v, phi, lam = tm.g.values, sd.right, sd.left, sd.lam
    gv = g * v
    w = gv - (phi @ gv / n) * v
    rhs = tm.matrix.T @ w
    u = solve_bordered_general(tm.matrix, lam, v, phi, rhs, method=method)
    return float(lam * (phi @ (g * gv)) / n + 2.0 * lam * (phi @ (g * u)) / n)


@dataclass
class TwistSpectralCurve:
    z_values: np.ndarray
    lam: np.ndarray
    dlam: np.ndarray
    ddlam: np.ndarray
    spectra: list = field(default_factory=list, repr=False)

    @property
    def log_lam(self) -> np.ndarray:
        return np.log(self.lam)


def twist_curve(
    base: TransferMatrix,
    g: DiscretizedObservable,
    z_values,
    tol: float = DEFAULT_EIG_TOL,
    derivatives: bool = True,
    keep_vectors: bool = False,
    z_max: float = DEFAULT_Z_MAX,
) -> TwistSpectralCurve:
    """Evaluate ``lam``, ``lam'`` and ``lam''`` along ``z_values``.

    Points are visited in the given order and each eigen-solve is
    warm-started from the previous one.
    """
    zs = np.asarray(z_values, dtype=float)
    lam = np.empty(len(zs))
    d1 = np.full(len(zs), np.nan)
    d2 = np.full(len(zs), np.nan)
    kept = []
    sd = None
    for k, z in enumerate(zs):
        tm = twist(base, g, z, z_max=z_max)
        sd = leading_eigendata(tm, sd, tol)
        lam[k] = sd.lam
        if derivatives:
            d1[k] = lambda_prime(tm, sd)
            d2[k] = lambda_second_general(tm, sd)
        if keep_vectors:
            kept.append(sd)
    return TwistSpectralCurve(zs, lam, d1, d2, kept)
