"""Command-line front end.

Every invocation is described by a :class:`JobConfig`; the config is echoed
into a ``<out>.meta.json`` sidecar next to the primary artifact so that a
job can be re-run with ``--config <sidecar>``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .maps import load_observable_csv, map_from_name, observable_from_name
from .perturb import run_convergence_study
from .sparse_core import DEFAULT_EIG_TOL, read_matrix_market, write_matrix_market
from .statistics import (
    DEFAULT_OPT_TOL,
    escape_rate,
    invariant_density,
    rate_function,
    variance,
)
from .ulam import Partition1D, build_ulam_1d, build_ulam_2d

COMMANDS = ("ulam", "density", "variance", "rate", "escape", "converge")
DEFAULT_FORMAT = {
    "ulam": "mtx",
    "density": "csv",
    "variance": "csv",
    "rate": "csv",
    "escape": "json",
    "converge": "json",
}


class ConfigError(ValueError):
    pass


def fmt(x) -> str:
    """17 significant digits, enough to round-trip any double."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def parse_grid(text: str) -> np.ndarray:
    """Parse ``start:step:stop`` (stop included when reached within 1e-9
    steps) or a comma-separated list."""
    text = text.strip()
    if ":" not in text:
        return np.array([float(t) for t in text.split(",") if t.strip()])
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"grid {text!r} is not start:step:stop")
    start, step, stop = (float(p) for p in parts)
    if step == 0 or (stop - start) / step < 0:
        raise ConfigError(f"grid {text!r} has a zero or wrong-signed step")
    q = (stop - start) / step
    count = int(round(q)) + 1 if abs(q - round(q)) <= 1e-9 else int(math.floor(q)) + 1
    return start + step * np.arange(count)


def parse_params(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            out[k.strip()] = v.strip()
    return out


def _int_list(text) -> list[int]:
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(float(t)) for t in str(text).split(",") if t.strip()]


@dataclass
class JobConfig:
    """Fully serialisable description of one CLI job."""

    command: str
    map: str = "double-tent"
    params: dict = field(default_factory=lambda: {"a": 2.1})
    cells: list = field(default_factory=lambda: [1000])
    dim: int = 1
    obs: list = field(default_factory=lambda: ["sin2pi"])
    obs_file: str | None = None
    matrix: str | None = None
    s_grid: str = "0:0.01:0.8"
    z_probe: str = "0"
    z_max: float = 30.0
    eig_tol: float = DEFAULT_EIG_TOL
    opt_tol: float = DEFAULT_OPT_TOL
    region: list = field(default_factory=lambda: [0.0, 0.5])
    kernel: str | None = None
    boundary: str = "reflect"
    eps: list = field(default_factory=list)
    samples_per_cell: int = 16
    seed: int = 0
    threads: int = 1
    out: str | None = None
    format: str | None = None

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.dim not in (1, 2):
            raise ConfigError("--dim must be 1 or 2")
        if self.dim == 2 and self.command != "ulam":
            raise ConfigError("2-D maps are supported by the ulam command only")
        if not self.cells or any(c < 2 for c in self.cells):
            raise ConfigError("--cells needs integers >= 2")
        fmt_ = self.format or DEFAULT_FORMAT[self.command]
        allowed = {"ulam": {"mtx"}, "converge": {"json", "csv"}}.get(self.command, {"csv", "json"})
        if fmt_ not in allowed:
            raise ConfigError(f"format {fmt_!r} not available for {self.command}; choose {sorted(allowed)}")
        if len(self.region) != 2 or not self.region[0] < self.region[1]:
            raise ConfigError("--region expects a,b with a < b")
        if self.threads < 1:
            raise ConfigError("--threads must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "JobConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="transferlab",
        description="Ulam estimates of invariant densities, variances, rate functions and escape rates.",
    )
    p.add_argument("--version", action="version", version=f"transferlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp_ = sub.add_parser(name)
        sp_.add_argument("--config", help="re-run a job from a JSON config or .meta.json sidecar")
        sp_.add_argument("--map", default=None)
        sp_.add_argument("--param", action="append", metavar="K=V")
        sp_.add_argument("--cells", default=None, help="cell count per axis; comma list allowed")
        sp_.add_argument("--dim", type=int, default=None)
        sp_.add_argument("--matrix", default=None, help="read the Ulam matrix from a Matrix Market file")
        sp_.add_argument("--obs", default=None, help="observable name(s), comma separated")
        sp_.add_argument("--obs-file", default=None, help="two-column CSV: cell (1-based), value")
        sp_.add_argument("--s-grid", default=None, help="start:step:stop or comma list")
        sp_.add_argument("--z-probe", default=None, help="twists probed by converge")
        sp_.add_argument("--z-max", type=float, default=None)
        sp_.add_argument("--eig-tol", type=float, default=None)
        sp_.add_argument("--opt-tol", type=float, default=None)
        sp_.add_argument("--region", default=None, metavar="A,B")
        sp_.add_argument("--kernel", choices=("uniform", "triangular"), default=None)
        sp_.add_argument("--boundary", choices=("reflect", "renormalize"), default=None)
        sp_.add_argument("--eps", default=None, help="kernel width(s), comma separated")
        sp_.add_argument("--samples-per-cell", type=int, default=None)
        sp_.add_argument("--seed", type=int, default=None)
        sp_.add_argument("--threads", type=int, default=None)
        sp_.add_argument("--out", default=None)
        sp_.add_argument("--format", choices=("csv", "json", "mtx"), default=None)
    return p


def config_from_args(args) -> JobConfig:
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        cfg = JobConfig.from_dict(raw.get("config", raw))
        if cfg.command != args.command:
            raise ConfigError(f"config is for {cfg.command!r}, not {args.command!r}")
    else:
        cfg = JobConfig(args.command)
    if args.map is not None:
        cfg.map = args.map
        cfg.params = {}
    if args.param:
        cfg.params.update(parse_params(args.param))
    if args.cells is not None:
        cfg.cells = _int_list(args.cells)
    if args.obs is not None:
        cfg.obs = [o.strip() for o in args.obs.split(",") if o.strip()]
    if args.region is not None:
        try:
            cfg.region = [float(t) for t in args.region.split(",")]
        except ValueError:
            raise ConfigError(f"--region expects a,b, got {args.region!r}")
    if args.eps is not None:
        cfg.eps = [float(t) for t in args.eps.split(",") if t.strip()]
    simple = {
        "dim": "dim",
        "matrix": "matrix",
        "obs_file": "obs_file",
        "s_grid": "s_grid",
        "z_probe": "z_probe",
        "z_max": "z_max",
        "eig_tol": "eig_tol",
        "opt_tol": "opt_tol",
        "kernel": "kernel",
        "boundary": "boundary",
        "samples_per_cell": "samples_per_cell",
        "seed": "seed",
        "out": "out",
        "format": "format",
    }
    for attr, key in simple.items():
        val = getattr(args, attr)
        if val is not None:
            setattr(cfg, key, val)
    if args.threads is not None:
        cfg.threads = args.threads
    elif not args.config and os.environ.get("TRANSFERLAB_THREADS"):
        try:
            cfg.threads = int(os.environ["TRANSFERLAB_THREADS"])
        except ValueError:
            raise ConfigError("TRANSFERLAB_THREADS must be an integer")
    cfg.validate()
    return cfg


def _observables(cfg):
    if cfg.obs_file:
        try:
            g = load_observable_csv(cfg.obs_file)
        except ValueError as exc:
            raise ConfigError(str(exc))
        return [(Path(cfg.obs_file).name, g)]
    try:
        return [(name, observable_from_name(name)) for name in cfg.obs]
    except ValueError as exc:
        raise ConfigError(str(exc))


def _the_map(cfg):
    try:
        return map_from_name(cfg.map, cfg.params, cfg.dim)
    except ValueError as exc:
        raise ConfigError(str(exc))


def _matrices(cfg):
    if cfg.matrix:
        P = read_matrix_market(cfg.matrix)
        P = type(P)(P.matrix, Partition1D(P.n), {"map": cfg.map, "source": cfg.matrix})
        return [P]
    T = _the_map(cfg)
    return [build_ulam_1d(T, n) for n in cfg.cells]


def _table_text(header, rows, out_format) -> str:
    if out_format == "json":
        return json.dumps([dict(zip(header, r)) for r in rows], indent=2) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) if isinstance(x, (float, int, np.floating, np.integer)) else x for x in r])
    return buf.getvalue()


def _json_text(obj) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(type(o).__name__)

    return json.dumps(obj, indent=2, default=default) + "\n"


def _emit(cfg, text: str) -> list[str]:
    if cfg.out is None:
        sys.stdout.write(text)
        return []
    Path(cfg.out).write_text(text)
    return [cfg.out]


def _cmd_ulam(cfg):
    T = _the_map(cfg)
    if cfg.out is None:
        raise ConfigError("ulam needs --out for the Matrix Market file")
    if cfg.dim == 1:
        if len(cfg.cells) != 1:
            raise ConfigError("ulam builds one matrix; give a single --cells value")
        P = build_ulam_1d(T, cfg.cells[0])
    else:
        P = build_ulam_2d(T, cfg.cells[0], cfg.samples_per_cell, cfg.seed)
    write_matrix_market(cfg.out, P, comment=f"transferlab {__version__} {P.meta.get('map')}")
    return [cfg.out], {"matrix": P.meta, "n": P.n, "nnz": int(P.matrix.nnz)}


def _cmd_density(cfg):
    Ps = _matrices(cfg)
    if len(Ps) != 1:
        raise ConfigError("density takes a single --cells value")
    P = Ps[0]
    v = invariant_density(P, cfg.eig_tol)
    mids = (np.arange(P.n) + 0.5) / P.n
    rows = [(i + 1, m, val) for i, (m, val) in enumerate(zip(mids, v))]
    fmt_ = cfg.format or "csv"
    return _emit(cfg, _table_text(["cell", "midpoint", "density"], rows, fmt_)), {"n": P.n}


def _cmd_variance(cfg):
    rows, timings = [], []
    for P in _matrices(cfg):
        v = invariant_density(P, cfg.eig_tol)
        for name, g in _observables(cfg):
            t0 = time.perf_counter()
            rep = variance(P, g, cfg.eig_tol, density=v)
            rows.append((P.n, name, rep.sigma2, rep.dlam, rep.ddlam))
            # timings go to the sidecar so the artifact itself is reproducible
            timings.append({"n": P.n, "observable": name, "wall_ms": (time.perf_counter() - t0) * 1e3})
    header = ["n", "observable", "sigma2", "dlam", "ddlam"]
    return _emit(cfg, _table_text(header, rows, cfg.format or "csv")), {"rows": len(rows), "timings": timings}


def _cmd_rate(cfg):
    Ps = _matrices(cfg)
    obs = _observables(cfg)
    if len(Ps) != 1 or len(obs) != 1:
        raise ConfigError("rate takes a single --cells value and a single observable")
    s = parse_grid(cfg.s_grid)
    if np.any(np.diff(s) < 0):
        raise ConfigError("--s-grid must be ascending")
    res = rate_function(
        s, Ps[0], obs[0][1], opt_tol=cfg.opt_tol, eig_tol=cfg.eig_tol, z_bounds=(-cfg.z_max, cfg.z_max)
    )
    rows = [(si, ri, zi, it, st) for si, ri, zi, it, st in zip(res.s_grid, res.r, res.z_star, res.iterations, res.status)]
    text = _table_text(["s", "r", "z_star", "iters", "status"], rows, cfg.format or "csv")
    extra = {"saturated": int(res.saturated.sum()), "failed": int(res.failed.sum()), "mode": "warm-start"}
    return _emit(cfg, text), extra


def _cmd_escape(cfg):
    Ps = _matrices(cfg)
    if len(Ps) != 1:
        raise ConfigError("escape takes a single --cells value")
    rep = escape_rate(Ps[0], (float(cfg.region[0]), float(cfg.region[1])), eig_tol=cfg.eig_tol)
    doc = {
        "n": Ps[0].n,
        "region": cfg.region,
        "cells": int(rep.region.size),
        "lambda_sub": fmt(rep.lambda_sub),
        "escape_rate": fmt(rep.escape_rate),
    }
    if (cfg.format or "json") == "csv":
        text = _table_text(list(doc), [tuple(doc.values())], "csv")
    else:
        text = _json_text(doc)
    return _emit(cfg, text), {}


def _cmd_converge(cfg):
    T = _the_map(cfg)
    obs = _observables(cfg)
    if len(obs) != 1:
        raise ConfigError("converge takes a single observable")
    s = parse_grid(cfg.s_grid) if cfg.s_grid else np.array([])
    z = parse_grid(cfg.z_probe)
    if cfg.kernel or cfg.eps:
        if len(cfg.eps) < 3:
            raise ConfigError("kernel study needs at least 3 --eps values")
        if len(cfg.cells) != 1:
            raise ConfigError("kernel study runs at a single --cells value")
        study = run_convergence_study(
            T, obs[0][1], "kernel_eps", cfg.eps, z, s, n=cfg.cells[0],
            kernel_shape=cfg.kernel or "uniform", boundary=cfg.boundary,
            eig_tol=cfg.eig_tol, opt_tol=cfg.opt_tol, threads=cfg.threads,
        )
    else:
        study = run_convergence_study(
            T, obs[0][1], "refine_n", cfg.cells, z, s,
            eig_tol=cfg.eig_tol, opt_tol=cfg.opt_tol, threads=cfg.threads,
        )
    rows = list(study.rows())
    csv_text = _table_text(["grid_value", "metric_name", "value", "deviation"], rows, "csv")
    if (cfg.format or "json") == "csv":
        return _emit(cfg, csv_text), {"errors": len(study.errors)}
    written = _emit(cfg, _json_text(study.to_dict()))
    if cfg.out is not None:
        flat = str(Path(cfg.out).with_suffix(".csv"))
        Path(flat).write_text(csv_text)
        written.append(flat)
    return written, {"errors": len(study.errors)}


_HANDLERS = {
    "ulam": _cmd_ulam,
    "density": _cmd_density,
    "variance": _cmd_variance,
    "rate": _cmd_rate,
    "escape": _cmd_escape,
    "converge": _cmd_converge,
}


def run(cfg: JobConfig) -> int:
    """Execute a job; returns the process exit status.

    On success writes the artifact (stdout when ``out`` is None) and, when
    ``out`` is set, a ``<out>.meta.json`` sidecar.  On failure writes a
    JSON error document to stderr and returns 2 (bad input) or 1.
    """
    t0 = time.perf_counter()
    try:
        cfg.validate()
        written, extra = _HANDLERS[cfg.command](cfg)
    except ConfigError as exc:
        return _fail(cfg, exc, 2)
    except OSError as exc:
        return _fail(cfg, exc, 2)
    except Exception as exc:
        return _fail(cfg, exc, 1)
    if cfg.out is not None:
        meta = {
            "tool": "transferlab",
            "version": __version__,
            "config": cfg.to_dict(),
            "wall_time_s": time.perf_counter() - t0,
            "artifacts": written,
            **extra,
        }
        Path(cfg.out + ".meta.json").write_text(_json_text(meta))
    return 0


def _fail(cfg, exc, code):
    doc = {
        "error": type(exc).__name__,
        "module": type(exc).__module__,
        "command": getattr(cfg, "command", None),
        "message": str(exc),
    }
    sys.stderr.write(json.dumps(doc) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        return _fail(argparse.Namespace(command=args.command), exc, 2)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
