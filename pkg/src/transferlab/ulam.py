"""Ulam discretisation of transfer operators on regular partitions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .maps import Map2D, Observable, PiecewiseAffineMap1D, eval_observable
from .sparse_core import TransferMatrix

__all__ = [
    "Partition1D",
    "CubePartition",
    "DiscretizedObservable",
    "build_ulam_1d",
    "build_ulam_2d",
    "discretize_observable",
    "cell_midpoints",
    "cells_in_interval",
]

# overlaps below this (in units of one cell) are float noise at cell boundaries
_DROP = 1e-12


@dataclass(frozen=True)
class Partition1D:
    """Equipartition of [0, 1) into ``n`` cells ``[i/n, (i+1)/n)``."""

    n: int

    @property
    def width(self) -> float:
        return 1.0 / self.n

    def midpoints(self) -> np.ndarray:
        return cell_midpoints(self.n)

    def to_dict(self) -> dict:
        return {"kind": "interval", "n": self.n}


@dataclass(frozen=True)
class CubePartition:
    """Grid of ``n**d`` cubes of side ``1/n``, cells in C (row-major) order."""

    d: int
    n: int

    @property
    def size(self) -> int:
        return self.n**self.d

    @property
    def diameter(self) -> float:
        return math.sqrt(self.d) / self.n

    @property
    def inscribed_diameter(self) -> float:
        return 1.0 / self.n

    @property
    def regularity(self) -> float:
        """Ratio of cell diameter to inscribed-ball diameter (``sqrt(d)``)."""
        return math.sqrt(self.d)

    def cell_of(self, pts: np.ndarray) -> np.ndarray:
        idx = np.minimum(np.floor(pts * self.n).astype(np.int64), self.n - 1)
        return np.ravel_multi_index(tuple(idx.T), (self.n,) * self.d)

    def to_dict(self) -> dict:
        return {"kind": "cubes", "d": self.d, "n": self.n}


@dataclass(frozen=True)
class DiscretizedObservable:
    """Observable sampled at cell midpoints, optionally centred.

    ``shift`` is the constant that was subtracted from the raw midpoint
    samples; ``centered_against`` names the density used for it.
    """

    values: np.ndarray
    observable: Observable | None = None
    shift: float = 0.0
    centered_against: str | None = None

    @property
    def n(self) -> int:
        return len(self.values)

    def centered(self, density: np.ndarray, label: str = "invariant") -> "DiscretizedObservable":
        """Subtract the mean ``sum(g v) / n`` computed against ``density``."""
        raw = self.values + self.shift
        mean = float(raw @ density / len(raw))
        return DiscretizedObservable(raw - mean, self.observable, mean, label)


def cell_midpoints(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def cells_in_interval(n: int, a: float, b: float) -> np.ndarray:
    """Indices of cells whose midpoint lies in ``[a, b]``."""
    mids = cell_midpoints(n)
    return np.flatnonzero((mids >= a) & (mids <= b))


def build_ulam_1d(T: PiecewiseAffineMap1D, n: int, normalize: bool = True) -> TransferMatrix:
    """Exact Ulam matrix ``P[i, j] = m(I_i & T^-1 I_j) / m(I_i)``.

    Work is done in cell units ``u = n x``: the part of cell ``i`` owned by
    a branch is an interval whose affine image overlaps a few target cells;
    each overlap length, divided by ``|slope|``, is the pulled-back measure
    as a fraction of the source cell.  Rows are renormalised afterwards
    unless ``normalize`` is False.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"cell count must be a positive integer, got {n!r}")
    n = int(n)
    rows, cols, vals = [], [], []
    cells = np.arange(n, dtype=float)
    for k, br in enumerate(T.branches):
        lo_u, hi_u = br.left * n, br.right * n
        first = int(math.floor(lo_u))
        last = min(int(math.ceil(hi_u)), n)
        i = np.arange(first, last)
        a = np.maximum(cells[first:last], lo_u)
        b = np.minimum(cells[first:last] + 1.0, hi_u)
        keep = b - a > _DROP
        i, a, b = i[keep], a[keep], b[keep]
        if i.size == 0:
            continue
        ya = br.slope * a + br.intercept * n
        yb = br.slope * b + br.intercept * n
        y0 = np.minimum(ya, yb)
        y1 = np.maximum(ya, yb)
        if y0.min() < -1e-9 * n or y1.max() > n * (1 + 1e-9):
            raise ValueError(f"branch {k} of {T.name} maps mass outside [0, 1]")
        y0 = np.clip(y0, 0.0, float(n))
        y1 = np.clip(y1, 0.0, float(n))
        span = int(np.max(np.floor(y1) - np.floor(y0))) + 1
        base = np.floor(y0)
        scale = 1.0 / abs(br.slope)
        for m in range(span):
            j = base + m
            ov = np.minimum(y1, j + 1.0) - np.maximum(y0, j)
            ok = (ov > _DROP) & (j < n)
            rows.append(i[ok])
            cols.append(j[ok].astype(np.int64))
            vals.append(ov[ok] * scale)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    meta = {"map": T.name, "params": dict(T.params), "n": n, "assembly": "exact-1d"}
    return TransferMatrix.from_triplets(rows, cols, vals, n, Partition1D(n), meta, normalize=normalize)


def build_ulam_2d(
    T: Map2D,
    n: int,
    samples_per_cell: int,
    rng_seed: int,
    jitter: float = 0.0,
) -> TransferMatrix:
    """Sampled Ulam matrix on the ``n x n`` cube partition of the unit square.

    When ``samples_per_cell`` is a perfect square ``m*m`` each cell is
    sampled on the midpoints of an ``m x m`` sub-grid, each point displaced
    by up to ``jitter/2`` sub-cell widths (uniform, seeded).  Otherwise the
    samples are uniform random in the cell.  ``P[i, j]`` is the fraction of
    cell ``i``'s samples that land in cell ``j``.

    Raises
    ------
    ValueError
        If the map sends a sample outside the unit square.
    """
    if n < 2:
        raise ValueError("need at least 2 cells per axis")
    if samples_per_cell < 1:
        raise ValueError("samples_per_cell must be >= 1")
    if not 0.0 <= jitter <= 1.0:
        raise ValueError("jitter must lie in [0, 1]")
    part = CubePartition(2, n)
    rng = np.random.default_rng(rng_seed)
    m = math.isqrt(samples_per_cell)
    if m * m == samples_per_cell:
        sub = (np.arange(m) + 0.5) / m
        offs = np.array([(sx, sy) for sx in sub for sy in sub])
        stratified = True
    else:
        stratified = False
    h = 1.0 / n
    corners = np.array([(ix, iy) for ix in range(n) for iy in range(n)], dtype=float) * h
    K = samples_per_cell
    if stratified:
        local = np.broadcast_to(offs, (n * n, K, 2)).copy()
        if jitter > 0:
            local += rng.uniform(-0.5, 0.5, size=local.shape) * (jitter / m)
    else:
        local = rng.uniform(0.0, 1.0, size=(n * n, K, 2))
    pts = corners[:, None, :] + local * h
    pts = np.clip(pts, 0.0, 1.0).reshape(-1, 2)
    img = np.asarray(T(pts), dtype=float)
    bad = ~np.all((img >= 0.0) & (img <= 1.0), axis=1)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise ValueError(f"map {T.name} sends {pts[k].tolist()} to {img[k].tolist()}, outside [0,1]^2")
    src = np.repeat(np.arange(n * n), K)
    dst = part.cell_of(img)
    vals = np.full(src.shape, 1.0 / K)
    meta = {
        "map": T.name,
        "params": dict(T.params),
        "n": n,
        "dim": 2,
        "assembly": "sampled-2d",
        "samples_per_cell": K,
        "seed": rng_seed,
        "jitter": jitter,
    }
    return TransferMatrix.from_triplets(src, dst, vals, n * n, part, meta)


def discretize_observable(g: Observable, n: int) -> DiscretizedObservable:
    """Midpoint samples ``g((i + 1/2) / n)``, ``i = 0..n-1``; no centering."""
    if n < 1:
        raise ValueError("need at least one cell")
    return DiscretizedObservable(np.asarray(eval_observable(g, cell_midpoints(n)), dtype=float).reshape(n), g)
