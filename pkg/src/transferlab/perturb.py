"""Perturbed operator families and convergence measurements.

Two families are supported: grid refinement (Ulam matrices for a list of
cell counts) and stochastic kernels applied after the Ulam step at a fixed
resolution.  For each member we record ``lam(z)`` on a set of twists, the
variance, and the rate function on a set of thresholds, then measure the
deviation from the finest member.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .maps import Observable, PiecewiseAffineMap1D
from .sparse_core import DEFAULT_EIG_TOL, TransferMatrix, normalize_rows
from .statistics import DEFAULT_OPT_TOL, centered_observable, invariant_density, rate_function, variance
from .twist import leading_eigendata, twist
from .ulam import build_ulam_1d

__all__ = [
    "KernelSpec",
    "ConvergenceStudy",
    "kernel_matrix",
    "apply_kernel",
    "run_convergence_study",
    "rate_uniform_deviation",
    "nonincreasing_with_one_drop",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KernelSpec:
    """Noise kernel of total width ``eps`` centred at the current point.

    ``uniform`` has density ``1/eps`` on ``[-eps/2, eps/2]``; ``triangular``
    peaks at ``2/eps`` and vanishes at ``+-eps/2``.  ``boundary`` chooses
    how mass pushed past 0 or 1 is treated: folded back (``reflect``) or
    dropped with the row rescaled (``renormalize``).
    """

    shape: str = "uniform"
    eps: float = 0.01
    boundary: str = "reflect"

    def __post_init__(self):
        if self.shape not in ("uniform", "triangular"):
            raise ValueError(f"unknown kernel shape {self.shape!r}")
        if not self.eps > 0:
            raise ValueError("kernel width eps must be positive")
        if self.boundary not in ("reflect", "renormalize"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")

    def density(self, d):
        h = self.eps / 2.0
        d = np.abs(d)
        # 1e-12 slack keeps offsets that sit exactly on the support edge
        inside = d <= h * (1 + 1e-12)
        if self.shape == "uniform":
            return np.where(inside, 1.0 / self.eps, 0.0)
        return np.where(inside, (2.0 / self.eps) * np.clip(1.0 - d / h, 0.0, None), 0.0)


def kernel_matrix(k: KernelSpec, n: int) -> sp.csr_matrix:
    """Row-stochastic banded matrix sampling the kernel at cell-midpoint offsets."""
    width = 1.0 / n
    if k.eps < width:
        warnings.warn(
            f"kernel width {k.eps} is below the cell width {width}; the kernel is nearly the identity",
            RuntimeWarning,
            stacklevel=2,
        )
    reach = int(math.floor(k.eps / 2.0 / width * (1 + 1e-12)))
    offsets = np.arange(-reach, reach + 1)
    w = k.density(offsets * width)
    w = w / w.sum()
    keep = w > 0
    offsets, w = offsets[keep], w[keep]
    i = np.repeat(np.arange(n), len(offsets))
    j = i + np.tile(offsets, n)
    vals = np.tile(w, n)
    if k.boundary == "reflect":
        # fold repeatedly so that kernels wider than the interval still land inside
        while np.any((j < 0) | (j >= n)):
            j = np.where(j < 0, -1 - j, j)
            j = np.where(j >= n, 2 * n - 1 - j, j)
        K = sp.coo_matrix((vals, (i, j)), shape=(n, n)).tocsr()
        K.sum_duplicates()
        return K
    ok = (j >= 0) & (j < n)
    K = sp.coo_matrix((vals[ok], (i[ok], j[ok])), shape=(n, n)).tocsr()
    return normalize_rows(K)


def apply_kernel(P: TransferMatrix, k: KernelSpec) -> TransferMatrix:
    """Transfer step followed by noise: returns ``P @ K`` (still stochastic)."""
    K = kernel_matrix(k, P.n)
    out = (P.matrix @ K).tocsr()
    out = normalize_rows(out)
    meta = dict(P.meta, kernel={"shape": k.shape, "eps": k.eps, "boundary": k.boundary})
    return TransferMatrix(out, P.partition, meta)


@dataclass
class ConvergenceStudy:
    mode: str
    parameter_grid: list
    z_probe: np.ndarray
    s_probe: np.ndarray
    lambda_at_z: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    rate_values: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    fitted_exponent: dict = field(default_factory=dict)

    def deviations(self, metric: str) -> np.ndarray:
        """Deviation of every grid point from the last (finest) one.

        ``sigma2`` gives absolute differences; ``lambda`` and ``rate`` give
        the sup over the probe set.
        """
        if metric == "sigma2":
            vals = np.asarray(self.sigma2, dtype=float)
            return np.abs(vals - vals[-1])
        if metric == "lambda":
            arr = np.asarray(self.lambda_at_z, dtype=float)
            return np.max(np.abs(arr - arr[-1]), axis=1) if arr.size else np.zeros(len(self.parameter_grid))
        if metric == "rate":
            return rate_uniform_deviation(self)
        raise ValueError(f"unknown metric {metric!r}")

    def to_dict(self) -> dict:
        def clean(a):
            return [None if (isinstance(x, float) and not math.isfinite(x)) else x for x in a]

        return {
            "mode": self.mode,
            "parameter_grid": list(self.parameter_grid),
            "z_probe": self.z_probe.tolist(),
            "s_probe": self.s_probe.tolist(),
            "lambda_at_z": [clean(list(map(float, row))) for row in self.lambda_at_z],
            "sigma2": clean([float(x) for x in self.sigma2]),
            "rate_values": [clean(list(map(float, row))) for row in self.rate_values],
            "errors": self.errors,
            "deviations": {m: clean(self.deviations(m).tolist()) for m in ("sigma2", "lambda", "rate")},
            "fitted_exponent": self.fitted_exponent,
        }

    def rows(self):
        """Flat ``(grid_value, metric_name, value, deviation)`` records."""
        dev = {m: self.deviations(m) for m in ("sigma2", "lambda", "rate")}
        for k, p in enumerate(self.parameter_grid):
            yield (p, "sigma2", float(self.sigma2[k]), float(dev["sigma2"][k]))
            for zi, z in enumerate(self.z_probe):
                val = float(self.lambda_at_z[k][zi])
                yield (p, f"lambda(z={z:g})", val, abs(val - float(self.lambda_at_z[-1][zi])))
            for si, s in enumerate(self.s_probe):
                val = float(self.rate_values[k][si])
                yield (p, f"rate(s={s:g})", val, abs(val - float(self.rate_values[-1][si])))


def _fit_exponent(params, dev):
    """Least-squares slope of ``log dev`` against ``log param``."""
    p = np.asarray(params, dtype=float)
    d = np.asarray(dev, dtype=float)
    ok = (p > 0) & (d > 0) & np.isfinite(d)
    ok[-1] = False
    if ok.sum() < 2:
        return {"exponent": None, "residual": None, "points": int(ok.sum())}
    x, y = np.log(p[ok]), np.log(d[ok])
    A = np.column_stack([x, np.ones_like(x)])
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(res[0] / len(x))) if res.size else 0.0
    return {"exponent": float(coef[0]), "residual": resid, "points": int(ok.sum())}


def _measure(P, g, z_probe, s_probe, eig_tol, opt_tol):
    v = invariant_density(P, eig_tol)
    gd = centered_observable(g, v)
    lam = []
    sd = None
    for z in z_probe:
        sd = leading_eigendata(twist(P, gd, z), sd, eig_tol)
        lam.append(sd.lam)
    sig = variance(P, gd, eig_tol, density=v).sigma2
    rate = rate_function(s_probe, P, gd, opt_tol=opt_tol, eig_tol=eig_tol, density=v).r if len(s_probe) else []
    return lam, sig, list(rate)


def run_convergence_study(
    T: PiecewiseAffineMap1D,
    g: Observable,
    mode: str,
    grid,
    z_probe=(0.0,),
    s_probe=(),
    n: int = 5000,
    kernel_shape: str = "uniform",
    boundary: str = "reflect",
    eig_tol: float = DEFAULT_EIG_TOL,
    opt_tol: float = DEFAULT_OPT_TOL,
    threads: int = 1,
) -> ConvergenceStudy:
    """Measure spectral data, variance and rate function along a family.

    ``mode="refine_n"``: ``grid`` lists cell counts, coarse to fine.
    ``mode="kernel_eps"``: ``grid`` lists kernel widths at ``n`` cells,
    wide to narrow; a width of 0 means no noise (the plain Ulam matrix).
    The last grid point is the reference.  Failures at a grid point are
    recorded in ``errors`` and the point's metrics are NaN.
    """
    grid = list(grid)
    if len(grid) < 3:
        raise ValueError("a convergence study needs at least 3 grid points")
    if mode not in ("refine_n", "kernel_eps"):
        raise ValueError(f"unknown mode {mode!r}")
    z_probe = np.asarray(z_probe, dtype=float)
    s_probe = np.asarray(s_probe, dtype=float)
    base = build_ulam_1d(T, n) if mode == "kernel_eps" else None

    def job(p):
        if mode == "refine_n":
            P = build_ulam_1d(T, int(p))
        elif p == 0:
            P = base
        else:
            P = apply_kernel(base, KernelSpec(kernel_shape, float(p), boundary))
        return _measure(P, g, z_probe, s_probe, eig_tol, opt_tol)

    study = ConvergenceStudy(mode, grid, z_probe, s_probe)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            futures = [ex.submit(job, p) for p in grid]
            outcomes = [_outcome(f.result) for f in futures]
    else:
        outcomes = [_outcome(lambda p=p: job(p)) for p in grid]
    for p, (res, err) in zip(grid, outcomes):
        if err is not None:
            log.warning("convergence study point %s failed: %s", p, err)
            study.errors.append({"grid_value": p, "error": err})
            res = ([math.nan] * len(z_probe), math.nan, [math.nan] * len(s_probe))
        lam, sig, rate = res
        study.lambda_at_z.append(lam)
        study.sigma2.append(sig)
        study.rate_values.append(rate)
    params = [1.0 / p if p > 0 else math.nan for p in grid] if mode == "refine_n" else grid
    study.fitted_exponent = {m: _fit_exponent(params, study.deviations(m)) for m in ("sigma2", "lambda", "rate")}
    return study


def _outcome(fn):
    try:
        return fn(), None
    except Exception as exc:  # recorded per grid point, study continues
        return None, f"{type(exc).__name__}: {exc}"


def rate_uniform_deviation(study: ConvergenceStudy) -> np.ndarray:
    """Sup over the threshold probe of ``|r_eps(s) - r_ref(s)|`` per grid point."""
    rows = study.rate_values
    lengths = {len(r) for r in rows}
    if len(lengths) > 1:
        raise ValueError("rate values were computed on different s grids")
    if not rows or lengths == {0}:
        return np.zeros(len(rows))
    arr = np.asarray(rows, dtype=float)
    return np.max(np.abs(arr - arr[-1]), axis=1)


def nonincreasing_with_one_drop(seq, atol: float = 0.0) -> bool:
    """True if removing at most one entry leaves a nonincreasing sequence."""
    seq = list(seq)

    def mono(s):
        return all(b <= a + atol for a, b in zip(s, s[1:]))

    return mono(seq) or any(mono(seq[:k] + seq[k + 1 :]) for k in range(len(seq)))
