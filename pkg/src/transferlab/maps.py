"""Piecewise expanding maps and the observables evaluated along their orbits.

One-dimensional maps are stored branch by branch so that Ulam matrices can
be assembled from exact interval preimages.  Two-dimensional maps are plain
vectorised callables; their Ulam matrices are assembled by sampling.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Branch",
    "PiecewiseAffineMap1D",
    "Map2D",
    "Observable",
    "make_double_tent",
    "make_doubling",
    "make_product_doubling",
    "make_identity_2d",
    "make_skew_expanding_2d",
    "eval_observable",
    "load_observable_csv",
    "OBSERVABLE_KINDS",
]

# Offset printed next to cos(2 pi x); kept verbatim, centering removes it anyway.
COS_SHIFT = 0.0614

_IMAGE_SLACK = 1e-12


@dataclass(frozen=True)
class Branch:
    """Affine branch ``x -> slope * x + intercept`` on ``[left, right)``."""

    left: float
    right: float
    slope: float
    intercept: float

    def __call__(self, x):
        return self.slope * x + self.intercept

    def image(self) -> tuple[float, float]:
        y0, y1 = self(self.left), self(self.right)
        return (min(y0, y1), max(y0, y1))


@dataclass(frozen=True)
class PiecewiseAffineMap1D:
    """Interval map on [0, 1] made of expanding affine branches.

    Branch intervals are half-open ``[a_{i-1}, a_i)`` except the last one,
    which is closed at 1.  Construction checks that the branches tile
    ``[0, 1]``, that every slope is expanding and that no branch image
    leaves the unit interval.
    """

    branches: tuple[Branch, ...]
    name: str = "piecewise-affine"
    params: dict = field(default_factory=dict, compare=False)
    gamma_min: float = field(init=False)

    def __post_init__(self):
        if not self.branches:
            raise ValueError("a map needs at least one branch")
        object.__setattr__(self, "branches", tuple(self.branches))
        if self.branches[0].left != 0.0 or self.branches[-1].right != 1.0:
            raise ValueError("branches must start at 0 and end at 1")
        for k, (b0, b1) in enumerate(zip(self.branches, self.branches[1:])):
            if b0.right != b1.left:
                raise ValueError(f"branch {k} and {k + 1} do not share an endpoint")
        for k, b in enumerate(self.branches):
            if not b.left < b.right:
                raise ValueError(f"branch {k} has empty or reversed interval")
            lo, hi = b.image()
            if lo < -_IMAGE_SLACK or hi > 1.0 + _IMAGE_SLACK:
                raise ValueError(
                    f"branch {k} on [{b.left}, {b.right}) maps onto [{lo}, {hi}], "
                    "which leaves [0, 1]"
                )
        gamma = min(abs(b.slope) for b in self.branches)
        if not gamma > 1.0:
            raise ValueError(f"map is not expanding: min |slope| = {gamma}")
        object.__setattr__(self, "gamma_min", gamma)

    @property
    def breakpoints(self) -> np.ndarray:
        return np.array([b.left for b in self.branches] + [1.0])

    def branch_index(self, x):
        """Index of the branch that owns ``x`` (last branch owns 1)."""
        idx = np.searchsorted(self.breakpoints, x, side="right") - 1
        return np.clip(idx, 0, len(self.branches) - 1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = self.branch_index(x)
        slopes = np.array([b.slope for b in self.branches])
        icepts = np.array([b.intercept for b in self.branches])
        out = slopes[k] * x + icepts[k]
        return float(out) if out.ndim == 0 else out


def make_double_tent(a: float) -> PiecewiseAffineMap1D:
    """Four-branch non-Markov tent map with slopes ``(a, -a, -a, a)``.

    Parameters
    ----------
    a : float
        Slope modulus, ``1 < a <= 4``.
    """
    a = float(a)
    if not a > 1.0:
        raise ValueError(f"double tent needs a > 1 (got {a}); the map is not expanding")
    if a > 4.0:
        raise ValueError(f"double tent needs a <= 4 (got {a}); branch images leave [0, 1]")
    branches = (
        Branch(0.0, 0.25, a, 0.0),
        Branch(0.25, 0.5, -a, a / 2),
        Branch(0.5, 0.75, -a, 1.0 + a / 2),
        Branch(0.75, 1.0, a, 1.0 - a),
    )
    return PiecewiseAffineMap1D(branches, name="double-tent", params={"a": a})


def make_doubling() -> PiecewiseAffineMap1D:
    """``x -> 2x mod 1`` as two affine branches."""
    branches = (Branch(0.0, 0.5, 2.0, 0.0), Branch(0.5, 1.0, 2.0, -1.0))
    return PiecewiseAffineMap1D(branches, name="doubling", params={})


@dataclass(frozen=True)
class Map2D:
    """Map of the unit square given by a vectorised callable.

    ``eval`` takes an ``(N, 2)`` array and returns an ``(N, 2)`` array.
    """

    eval: Callable[[np.ndarray], np.ndarray]
    piecewise_affine: bool = False
    name: str = "map2d"
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, pts):
        return self.eval(np.atleast_2d(np.asarray(pts, dtype=float)))


def make_product_doubling() -> Map2D:
    return Map2D(lambda p: np.mod(2.0 * p, 1.0), True, "product-doubling")


def make_identity_2d() -> Map2D:
    return Map2D(lambda p: np.array(p, dtype=float, copy=True), True, "identity")


def make_skew_expanding_2d(c: float = 0.1) -> Map2D:
    """``(x, y) -> (2x mod 1, 3y + c sin(2 pi x) mod 1)``; smooth, non-affine."""

    def f(p):
        x, y = p[:, 0], p[:, 1]
        return np.column_stack(
            [np.mod(2.0 * x, 1.0), np.mod(3.0 * y + c * np.sin(2 * np.pi * x), 1.0)]
        )

    return Map2D(f, False, "skew-expanding", {"c": c})


OBSERVABLE_KINDS = ("cos2pi", "linear", "sin2pi", "indicator_half", "table", "custom")

_CUSTOM_NAMESPACE = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "pi", "where", "floor", "mod")
}


@dataclass(frozen=True)
class Observable:
    """Real observable on [0, 1].

    ``mean_shift`` records the constant subtracted when the observable was
    centred against a density; it is informational and never applied by
    :func:`eval_observable`, which always returns raw values.
    """

    kind: str
    values: tuple[float, ...] | None = None
    expression: str | None = None
    mean_shift: float = 0.0

    def __post_init__(self):
        if self.kind not in OBSERVABLE_KINDS:
            raise ValueError(f"unknown observable kind {self.kind!r}; choose from {OBSERVABLE_KINDS}")
        if self.kind == "table" and not self.values:
            raise ValueError("table observable needs values")
        if self.kind == "custom" and not self.expression:
            raise ValueError("custom observable needs an expression in x")

    @property
    def name(self) -> str:
        if self.kind == "custom":
            return f"custom({self.expression})"
        if self.kind == "table":
            return f"table[{len(self.values)}]"
        return self.kind

    def __call__(self, x):
        return eval_observable(self, x)

    def centered(self, shift: float) -> "Observable":
        return Observable(self.kind, self.values, self.expression, float(shift))


def eval_observable(g: Observable, x):
    """Raw (uncentred) value of ``g`` at ``x``; accepts scalars or arrays."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0.0) or np.any(xa > 1.0) or np.any(np.isnan(xa)):
        raise ValueError("observables are defined on [0, 1] only")
    kind = g.kind
    if kind == "cos2pi":
        out = np.cos(2 * np.pi * xa) - COS_SHIFT
    elif kind == "sin2pi":
        out = np.sin(2 * np.pi * xa)
    elif kind == "linear":
        out = 2.0 * xa - 1.0
    elif kind == "indicator_half":
        out = np.where(xa <= 0.5, 1.0, -1.0)
    elif kind == "table":
        vals = np.asarray(g.values, dtype=float)
        m = len(vals)
        idx = np.minimum(np.floor(xa * m).astype(int), m - 1)
        out = vals[idx]
    else:
        ns = dict(_CUSTOM_NAMESPACE, x=xa)
        out = np.asarray(eval(g.expression, {"__builtins__": {}}, ns), dtype=float)
        out = np.broadcast_to(out, xa.shape).astype(float)
    return float(out) if np.ndim(out) == 0 else out


def load_observable_csv(path: str | Path) -> Observable:
    """Read a tabulated observable from ``cell,value`` rows (cells 1-based).

    Every cell ``1..m`` must appear exactly once; a header row is allowed.
    """
    rows: dict[int, float] = {}
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            try:
                cell, value = int(row[0]), float(row[1])
            except (ValueError, IndexError):
                if line_no == 1:
                    continue
                raise ValueError(f"{path}:{line_no}: expected 'cell,value', got {row!r}")
            if cell in rows:
                raise ValueError(f"{path}:{line_no}: duplicate cell {cell}")
            rows[cell] = value
    m = len(rows)
    if m == 0 or sorted(rows) != list(range(1, m + 1)):
        raise ValueError(f"{path}: cells must be exactly 1..{m}")
    return Observable("table", values=tuple(rows[i] for i in range(1, m + 1)))


def observable_from_name(name: str) -> Observable:
    aliases = {"indicator": "indicator_half", "cos": "cos2pi", "sin": "sin2pi"}
    kind = aliases.get(name, name)
    if kind in ("table", "custom"):
        raise ValueError(f"{kind} observables need data; use a file or an expression")
    if kind not in OBSERVABLE_KINDS:
        if "x" in name:
            return Observable("custom", expression=name)
        raise ValueError(f"unknown observable {name!r}")
    return Observable(kind)


MAPS_1D = {
    "double-tent": lambda params: make_double_tent(params.get("a", 2.1)),
    "doubling": lambda params: make_doubling(),
}

MAPS_2D = {
    "product-doubling": lambda params: make_product_doubling(),
    "identity": lambda params: make_identity_2d(),
    "skew-expanding": lambda params: make_skew_expanding_2d(params.get("c", 0.1)),
}


def map_from_name(name: str, params: dict | None = None, dim: int = 1):
    params = dict(params or {})
    table = MAPS_1D if dim == 1 else MAPS_2D
    if name not in table:
        raise ValueError(f"unknown {dim}-D map {name!r}; choose from {sorted(table)}")
    return table[name](params)


def piecewise_from_arrays(
    breakpoints: Sequence[float], slopes: Sequence[float], intercepts: Sequence[float], name: str = "custom"
) -> PiecewiseAffineMap1D:
    if not len(breakpoints) == len(slopes) + 1 == len(intercepts) + 1:
        raise ValueError("need len(breakpoints) == len(slopes) + 1 == len(intercepts) + 1")
    branches = tuple(
        Branch(float(breakpoints[k]), float(breakpoints[k + 1]), float(s), float(c))
        for k, (s, c) in enumerate(zip(slopes, intercepts))
    )
    if any(math.isnan(b.slope) for b in branches):
        raise ValueError("NaN slope")
    return PiecewiseAffineMap1D(branches, name=name)
