"""CLT variance, large-deviation rate function and escape rate from Ulam matrices."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .maps import Observable, PiecewiseAffineMap1D
from .sparse_core import (
    DEFAULT_EIG_TOL,
    ConvergenceError,
    SpectralData,
    TransferMatrix,
    power_method,
    solve_bordered,
)
from .twist import leading_eigendata, lambda_prime, lambda_second_general, twist
from .ulam import DiscretizedObservable, cells_in_interval, discretize_observable

__all__ = [
    "VarianceReport",
    "RateFunctionResult",
    "EscapeReport",
    "invariant_density",
    "centered_observable",
    "variance",
    "rate_function",
    "escape_rate",
    "consistency_check_rate_vs_escape",
    "birkhoff_variance_mc",
    "DEFAULT_OPT_TOL",
    "DEFAULT_Z_BOUNDS",
]

log = logging.getLogger(__name__)

DEFAULT_OPT_TOL = 1e-6
DEFAULT_Z_BOUNDS = (-30.0, 30.0)


@dataclass
class VarianceReport:
    sigma2: float
    ddlam: float
    dlam: float
    n: int
    observable: str
    map: str
    sigma2_resolvent: float | None = None

    def as_row(self) -> dict:
        return {
            "n": self.n,
            "observable": self.observable,
            "sigma2": self.sigma2,
            "dlam": self.dlam,
            "ddlam": self.ddlam,
        }


@dataclass
class RateFunctionResult:
    s_grid: np.ndarray
    r: np.ndarray
    z_star: np.ndarray
    iterations: np.ndarray
    status: list[str]
    V_bounds: tuple[float, float]
    warm_start: bool = True

    @property
    def saturated(self) -> np.ndarray:
        return np.array([st == "saturated" for st in self.status])

    @property
    def failed(self) -> np.ndarray:
        return np.array([st not in ("ok", "saturated") for st in self.status])


@dataclass
class EscapeReport:
    region: np.ndarray
    lambda_sub: float
    escape_rate: float
    iterations: int = 0


def invariant_density(P: TransferMatrix, tol: float = DEFAULT_EIG_TOL) -> np.ndarray:
    """Stationary density of ``P`` with ``sum(v) / n == 1``."""
    return power_method(P, side="right", tol=tol).right


def centered_observable(g: Observable | DiscretizedObservable, v: np.ndarray) -> DiscretizedObservable:
    gd = g if isinstance(g, DiscretizedObservable) else discretize_observable(g, len(v))
    if gd.n != len(v):
        raise ValueError(f"observable has {gd.n} cells, density has {len(v)}")
    return gd.centered(v)


def variance(
    P: TransferMatrix,
    g: Observable | DiscretizedObservable,
    eig_tol: float = DEFAULT_EIG_TOL,
    density: np.ndarray | None = None,
    cross_check: bool = False,
    method: str = "auto",
) -> VarianceReport:
    """CLT variance ``lam''(0) - lam'(0)^2`` of the Ulam approximation.

    Centres ``g`` against the invariant density ``v``, solves one bordered
    system ``[[P.T - I, -v], [1, 0]] (dv, dlam) = (-P.T (g v), 0)`` and
    returns ``ddlam = (sum g^2 v + 2 sum g dv) / n`` minus ``dlam^2``.

    With ``cross_check=True`` the second derivative is also computed from
    the general resolvent formula at ``z = 0`` and stored in
    ``sigma2_resolvent``.
    """
    n = P.n
    v = invariant_density(P, eig_tol) if density is None else np.asarray(density, dtype=float)
    gd = centered_observable(g, v)
    gv = gd.values * v
    dv, dlam = solve_bordered(P, v, -(P.matrix.T @ gv), method=method)
    ddlam = float((gd.values @ gv + 2.0 * gd.values @ dv) / n)
    sigma2 = ddlam - dlam**2
    obs = gd.observable.name if gd.observable is not None else "table"
    rep = VarianceReport(sigma2, ddlam, dlam, n, obs, P.meta.get("map", "?"))
    if cross_check:
        sd = SpectralData(1.0, right=v, left=np.ones(n))
        rep.sigma2_resolvent = lambda_second_general(twist(P, gd, 0.0), sd, method=method)
    if sigma2 < -1e-10:
        log.warning("negative variance %.3e: the leading eigenvalue may not be simple", sigma2)
    return rep


class _LegendreObjective:
    """``z -> (ln lam, (ln lam)', (ln lam)'')`` with warm-started eigen-solves."""

    def __init__(self, P, gd, eig_tol, z_max, method):
        self.P, self.gd, self.eig_tol, self.z_max, self.method = P, gd, eig_tol, z_max, method
        self.sd: SpectralData | None = None
        self.evaluations = 0

    def __call__(self, z):
        tm = twist(self.P, self.gd, z, z_max=self.z_max)
        self.sd = leading_eigendata(tm, self.sd, self.eig_tol)
        self.evaluations += 1
        lam = self.sd.lam
        d1 = lambda_prime(tm, self.sd) / lam
        d2 = lambda_second_general(tm, self.sd, method=self.method) / lam - d1**2
        return math.log(lam), d1, d2


def _minimize_legendre(obj, s, z0, bounds, tol, max_iter):
    """Safeguarded Newton on ``f'(z) = Lambda'(z) - s`` over ``bounds``.

    Keeps a bracket ``lo < root < hi`` (bounds count as unverified ends);
    Newton steps leaving the bracket, or failing to halve ``|f'|``, are
    replaced by bisection.  Returns ``(z, r, iterations, status)``.
    """
    zmin, zmax = bounds
    lo, hi = zmin, zmax
    lo_seen = hi_seen = False
    z = min(max(z0, zmin), zmax)
    prev_fp = math.inf
    best = None
    for it in range(1, max_iter + 1):
        L, d1, d2 = obj(z)
        fp = d1 - s
        r = s * z - L
        if best is None or abs(fp) < abs(best[1]):
            best = (z, fp, r)
        if abs(fp) <= tol:
            return z, r, it, "ok"
        if fp < 0:
            if z >= zmax:
                return z, r, it, "saturated"
            lo, lo_seen = z, True
        else:
            if z <= zmin:
                return z, r, it, "saturated"
            hi, hi_seen = z, True
        if hi - lo <= 4e-16 * max(1.0, abs(z)):
            zb, fpb, rb = best
            return zb, rb, it, "ok" if abs(fpb) <= tol else "resolution-limited"
        zn = z - fp / d2 if d2 > 0 else math.nan
        newton_ok = lo < zn < hi and abs(fp) <= 0.5 * abs(prev_fp)
        if it == 1:
            newton_ok = lo < zn < hi
        if not newton_ok:
            if fp < 0 and not hi_seen:
                zn = zmax if zmax - z < 1e-3 else (
                    min(zn, zmax) if lo < zn < hi else 0.5 * (z + zmax)
                )
            elif fp > 0 and not lo_seen:
                zn = zmin if z - zmin < 1e-3 else (
                    max(zn, zmin) if lo < zn < hi else 0.5 * (z + zmin)
                )
            else:
                zn = 0.5 * (lo + hi)
        prev_fp = fp
        z = zn
    zb, fpb, rb = best
    return zb, rb, max_iter, "max_iter"


def rate_function(
    s_grid,
    P: TransferMatrix,
    g: Observable | DiscretizedObservable,
    opt_tol: float = DEFAULT_OPT_TOL,
    eig_tol: float = DEFAULT_EIG_TOL,
    z_bounds: tuple[float, float] = DEFAULT_Z_BOUNDS,
    warm_start: bool = True,
    max_iter: int = 200,
    density: np.ndarray | None = None,
    method: str = "auto",
) -> RateFunctionResult:
    """Rate function ``r(s) = -min_z (ln lam(z) - s z)`` on a grid of ``s``.

    Each point is a 1-D convex minimisation solved by safeguarded Newton on
    the exact first and second derivatives of ``ln lam``.  With
    ``warm_start`` the previous optimiser seeds the next grid point (and
    the eigenvectors carry over); otherwise every point starts at ``z=0``.
    Points whose optimum lies outside ``z_bounds`` are flagged
    ``"saturated"`` and carry the value of the truncated conjugate; points
    that exhaust ``max_iter`` are flagged and the sweep continues.
    """
    s_grid = np.asarray(s_grid, dtype=float).ravel()
    n = P.n
    v = invariant_density(P, eig_tol) if density is None else np.asarray(density, dtype=float)
    gd = centered_observable(g, v)
    z_max = max(abs(z_bounds[0]), abs(z_bounds[1]))
    gmax = float(np.max(np.abs(gd.values)))
    if gmax > 0 and z_max * gmax > 700.0:
        lim = 700.0 / gmax
        z_bounds = (max(z_bounds[0], -lim), min(z_bounds[1], lim))
        z_max = lim
    obj = _LegendreObjective(P, gd, eig_tol, z_max, method)
    base_sd = SpectralData(1.0, right=v, left=np.ones(n))
    r = np.empty(len(s_grid))
    zs = np.empty(len(s_grid))
    iters = np.zeros(len(s_grid), dtype=int)
    status = []
    z0 = 0.0
    for k, s in enumerate(s_grid):
        if not warm_start:
            z0 = 0.0
            obj.sd = base_sd
        try:
            zk, rk, ik, st = _minimize_legendre(obj, s, z0, z_bounds, opt_tol, max_iter)
        except (ConvergenceError, np.linalg.LinAlgError, OverflowError, ValueError) as exc:
            log.warning("rate function failed at s=%g: %s", s, exc)
            zk, rk, ik, st = math.nan, math.nan, 0, f"error: {exc}"
            obj.sd = base_sd
        r[k], zs[k], iters[k] = rk, zk, ik
        status.append(st)
        if warm_start and st in ("ok", "saturated", "resolution-limited"):
            z0 = zk
    return RateFunctionResult(s_grid, r, zs, iters, status, tuple(z_bounds), warm_start)


def escape_rate(P: TransferMatrix, region, eig_tol: float = DEFAULT_EIG_TOL) -> EscapeReport:
    """Escape rate ``-ln lam_sub`` from a set of cells.

    ``lam_sub`` is the leading eigenvalue of ``P`` restricted to
    ``region x region``; rows are not renormalised, so mass leaving the
    region is lost.  ``region`` is an array of cell indices or a pair
    ``(a, b)`` selecting the cells whose midpoints lie in ``[a, b]``.
    """
    cells = _region_cells(P.n, region)
    if cells.size == 0:
        raise ValueError("escape region is empty")
    if cells.size == P.n:
        return EscapeReport(cells, 1.0, 0.0)
    sub = P.submatrix(cells)
    try:
        sd = power_method(sub, side="right", tol=eig_tol)
    except ValueError:
        # every row of the restriction is empty after one step
        return EscapeReport(cells, 0.0, math.inf)
    if sd.lam < 1e-300:
        return EscapeReport(cells, sd.lam, math.inf, sd.iterations)
    return EscapeReport(cells, sd.lam, -math.log(sd.lam), sd.iterations)


def _region_cells(n, region) -> np.ndarray:
    # a pair containing a float, e.g. (0, 0.5), is an interval; integers alone are cell indices
    if (
        isinstance(region, tuple)
        and len(region) == 2
        and all(isinstance(x, (int, float, np.floating, np.integer)) for x in region)
        and any(isinstance(x, (float, np.floating)) for x in region)
    ):
        return cells_in_interval(n, *region)
    cells = np.unique(np.asarray(region, dtype=int))
    if cells.size and (cells[0] < 0 or cells[-1] >= n):
        raise ValueError("region cell index out of range")
    return cells


def consistency_check_rate_vs_escape(
    P: TransferMatrix,
    region=(0.0, 0.5),
    s: float = 1.0 - 1e-15,
    opt_tol: float = 1e-13,
    eig_tol: float = 1e-14,
) -> float:
    """``|r(s) - escape_rate(region)|`` for the observable ``+1`` on
    ``[0, 1/2]``, ``-1`` elsewhere, at ``s`` just below 1.

    Returns the absolute difference; the two individual values are
    available from :func:`rate_function` and :func:`escape_rate`.
    """
    res = rate_function([s], P, Observable("indicator_half"), opt_tol=opt_tol, eig_tol=eig_tol)
    esc = escape_rate(P, region, eig_tol=eig_tol)
    return abs(float(res.r[0]) - esc.escape_rate)


def birkhoff_variance_mc(
    T: PiecewiseAffineMap1D,
    g: Observable,
    n_steps: int = 10_000_000,
    chains: int = 500,
    batch: int = 1000,
    burn_in: int = 200,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte-Carlo estimate of the asymptotic variance of Birkhoff sums.

    Runs ``chains`` independent orbits from uniform random starts, splits
    each into batches of length ``batch`` and uses ``batch * var(batch
    means)``.  Returns ``(estimate, standard_error)``; the standard error
    comes from the spread of per-chain estimates.
    """
    rng = np.random.default_rng(seed)
    per_chain = n_steps // chains
    nb = per_chain // batch
    if nb < 2:
        raise ValueError("need at least two batches per chain")
    x = rng.uniform(0.0, 1.0, size=chains)
    for _ in range(burn_in):
        x = T(x)
    sums = np.zeros((chains, nb))
    for b in range(nb):
        acc = np.zeros(chains)
        for _ in range(batch):
            acc += g(x)
            x = T(x)
        sums[:, b] = acc
    means = sums / batch
    mu = means.mean()
    # mu pools every chain, so it is effectively the true mean: divide by nb
    est_chain = batch * ((means - mu) ** 2).sum(axis=1) / nb
    est = float(est_chain.mean())
    se = float(est_chain.std(ddof=1) / math.sqrt(chains))
    return est, se
