"""Experiment orchestration: references, sweeps, adaptive runs and their files."""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import AdaptConfig, AdaptResult, adaptive_loop, write_records_csv
from .eigensolve import EigenSolverError, smallest_eigenpairs
from .estimators import compute_indicators, write_indicator_csv
from .mesh import (TriMesh, check_invariants, load_mesh, make_square_ring,
                   make_unit_square, min_angle_degrees, perimeter, save_mesh,
                   uniform_refine)
from .subspace import SpacePair, audit_bounds, write_audit_csv

__all__ = [
    "RING_REFERENCE",
    "ConfigError",
    "NumericalFailure",
    "ReferenceEstimate",
    "RunConfig",
    "aitken_extrapolate",
    "unit_square_eigenvalues",
    "make_domain",
    "uniform_reference",
    "effectivity",
    "emit_plot_data",
    "parse_config",
    "run",
]

log = logging.getLogger(__name__)

#: Double eigenvalue lambda_2 = lambda_3 of (0,1)^2 minus [1/3,2/3]^2, obtained
#: by Aitken extrapolation of conforming P1 values on very fine meshes (the
#: published value, truncated to three decimals).
RING_REFERENCE = 84.517


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# -- references -----------------------------------------------------------------

@dataclass
class ReferenceEstimate:
    value: float
    sequence: list
    residual: float


def _aitken3(a, b, c):
    d2 = (c - b) - (b - a)
    if d2 == 0 or c == b:
        return c
    return c - (c - b) ** 2 / d2


def aitken_extrapolate(values) -> ReferenceEstimate:
    """Delta-squared extrapolation from the last three terms.

    ``residual`` is the change with respect to the estimate from the
    previous triple (0 when only three terms are given).  A vanishing second
    difference means the sequence has converged: the last value is returned
    with zero residual.
    """
    v = [float(x) for x in values]
    if len(v) < 3:
        raise ValueError("Aitken extrapolation needs at least three values")
    if not all(math.isfinite(x) for x in v):
        raise ValueError("non-finite value in sequence")
    a, b, c = v[-3:]
    d2 = (c - b) - (b - a)
    if d2 == 0 or c == b:
        return ReferenceEstimate(c, v, 0.0)
    if not ((a < b < c) or (a > b > c)):
        raise ValueError("last three values must be strictly monotone")
    est = _aitken3(a, b, c)
    res = abs(est - _aitken3(*v[-4:-1])) if len(v) >= 4 else 0.0
    return ReferenceEstimate(est, v, res)


def unit_square_eigenvalues(count: int) -> np.ndarray:
    """Smallest ``count`` Dirichlet eigenvalues ``pi^2 (m^2 + n^2)`` of (0,1)^2."""
    m = int(math.isqrt(4 * count)) + 2
    vals = sorted(math.pi ** 2 * (i * i + j * j) for i in range(1, m + 1)
                  for j in range(1, m + 1))
    return np.array(vals[:count])


def uniform_reference(mesh: TriMesh, levels: int, nev: int, seed: int = 0,
                      start: int = 0) -> tuple[list, list]:
    """Conforming P1 eigenvalues on ``levels`` successive uniform refinements.

    Each level halves the mesh size (two bisection sweeps).  Returns the
    per-level values and, per eigenvalue index, the Aitken estimate.
    """
    if levels < 3:
        raise ValueError("need at least three levels")
    m = uniform_refine(mesh, 2 * start) if start else mesh
    seq = []
    for lev in range(levels):
        if lev:
            m = uniform_refine(m, 2)
        pair = SpacePair(m)
        s = smallest_eigenpairs(pair.p1.stiffness, pair.p1.mass, nev, seed=seed,
                                factor=pair.p1.factor)
        seq.append((pair.p1.ndof, s.values.copy()))
        log.info("reference level %d: ndof %d values %s", lev, pair.p1.ndof, s.values)
    est = [aitken_extrapolate([v[k] for _, v in seq]) for k in range(nev)]
    return seq, est


# -- domains --------------------------------------------------------------------

_SQUARE = re.compile(r"^unit_square\((\d+)\)$")


def make_domain(spec: str) -> TriMesh:
    spec = spec.strip()
    m = _SQUARE.match(spec)
    if m:
        return make_unit_square(int(m.group(1)))
    if spec == "square_ring":
        return make_square_ring()
    if spec.startswith("file:"):
        path = Path(spec[5:])
        if not path.exists():
            raise ConfigError(f"mesh file {path} does not exist")
        return load_mesh(path)
    raise ConfigError(f"unknown domain {spec!r}")


def default_reference(domain: str, target: tuple) -> float | None:
    if domain.strip() == "square_ring" and tuple(target) in ((2, 2), (2, None), (3, None)):
        return RING_REFERENCE
    if _SQUARE.match(domain.strip()):
        k = target[0]
        return float(unit_square_eigenvalues(k)[k - 1])
    return None


# -- plot data ------------------------------------------------------------------

def effectivity(records, reference: float) -> list[tuple[int, int, float, float, float]]:
    """Per iteration ``(iter, ndof, error, indicator, error/indicator)``.

    ``error`` is the sum of ``|reference - lambda_k|`` over the target
    cluster and ``indicator`` the sum of its ``mu^2``.
    """
    out = []
    for r in records:
        err = float(sum(abs(reference - r.eigenvalues[k - 1]) for k in r.cluster))
        ind = r.mu2_cluster
        out.append((r.iteration, r.ndof, err, ind, err / ind if ind > 0 else math.inf))
    return out


def _write_xy(path, rows):
    Path(path).write_text("".join(f"{_num(x)} {_num(y)}\n" for x, y in rows))


def _num(x):
    return str(int(x)) if isinstance(x, (int, np.integer)) else repr(float(x))


def emit_plot_data(records, reference: float | None, out_dir, prefix: str = "") -> list[Path]:
    """Two-column ``x y`` files for eigenvalue, error and effectivity plots."""
    if not records:
        raise ValueError("no records")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    nev = len(records[0].eigenvalues)
    for k in range(1, nev + 1):
        p = out / f"{prefix}eig_{k}_vs_iter.dat"
        _write_xy(p, [(r.iteration, float(r.eigenvalues[k - 1])) for r in records])
        files.append(p)
    if reference is not None:
        for k in records[-1].cluster:
            p = out / f"{prefix}err_{k}_vs_ndof.dat"
            _write_xy(p, [(r.ndof, abs(reference - float(r.eigenvalues[k - 1])))
                          for r in records])
            q = out / f"{prefix}signed_err_{k}_vs_ndof.dat"
            _write_xy(q, [(r.ndof, reference - float(r.eigenvalues[k - 1])) for r in records])
            files += [p, q]
        p = out / f"{prefix}effectivity_vs_iter.dat"
        _write_xy(p, [(it, eff) for it, _, _, _, eff in effectivity(records, reference)])
        files.append(p)
    return files


# -- configuration ----------------------------------------------------------------

_KEYS = {
    "run": {"domain", "mode", "nev", "seed", "out", "figures"},
    "adapt": {"theta", "marking", "max_dof", "target", "cluster_rtol", "indicator",
              "weights", "timing", "max_iter", "tol", "reference", "swap", "ties"},
    "reference": {"levels", "start"},
    "audit": {"sizes"},
}


@dataclass
class RunConfig:
    domain: str = "square_ring"
    mode: str = "adapt"
    nev: int = 3
    seed: int = 0
    out: str = "results"
    figures: bool = False
    theta: float = 0.5
    marking: str = "cluster"
    max_dof: int = 50_000
    target: str = "2:2"
    cluster_rtol: float = 0.02
    indicator: str = "combined"
    weights: str = "uniform"
    timing: bool = True
    max_iter: int = 200
    tol: float = 1e-9
    reference: float | None = None
    swap: bool = True
    ties: str = "lowest-id"
    levels: int = 4
    start: int = 0
    sizes: tuple = (8, 16, 32, 64)

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(theta=self.theta, target=parse_target(self.target),
                           marking=parse_marking(self.marking), max_dof=self.max_dof,
                           nev=self.nev, cluster_rtol=self.cluster_rtol, seed=self.seed,
                           indicator=self.indicator, weights=self.weights, tol=self.tol,
                           max_iter=self.max_iter, record_time=self.timing,
                           swap_diagnostic=self.swap, ties=self.ties)

    def resolved_reference(self) -> float | None:
        if self.reference is not None:
            return self.reference
        return default_reference(self.domain, parse_target(self.target))


def parse_marking(s) -> object:
    if s in ("cluster", "cluster_sum"):
        return "cluster"
    m = re.fullmatch(r"single:(\d+)", str(s))
    if not m:
        raise ConfigError(f"marking must be 'cluster' or 'single:<k>', got {s!r}")
    return ("single", int(m.group(1)))


def parse_target(s) -> tuple:
    m = re.fullmatch(r"(\d+):(\d+|auto)", str(s))
    if not m:
        raise ConfigError(f"target must be '<k>:<multiplicity>' or '<k>:auto', got {s!r}")
    q = None if m.group(2) == "auto" else int(m.group(2))
    return (int(m.group(1)), q)


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


_CONVERT = {
    "nev": int, "seed": int, "max_dof": int, "max_iter": int, "levels": int, "start": int,
    "theta": float, "cluster_rtol": float, "tol": float, "reference": float,
    "figures": _bool, "timing": _bool, "swap": _bool,
    "sizes": lambda s: tuple(int(x) for x in re.split(r"[,\s]+", s.strip()) if x),
}


def parse_config(path=None, text: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a ``key = value`` file with ``[run]``, ``[adapt]``, ``[reference]`` and
    ``[audit]`` sections, then apply ``overrides`` (CLI flags win)."""
    cfg = RunConfig()
    values = {}
    if path is not None or text is not None:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        src = str(path) if path is not None else "<config>"
        try:
            if text is None:
                text = Path(path).read_text(encoding="utf-8")
            cp.read_string(text, source=src)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except configparser.Error as exc:
            raise ConfigError(f"{src}: {exc}") from None
        lines = text.splitlines()
        for section in cp.sections():
            if section not in _KEYS:
                raise ConfigError(f"{src}: unknown section [{section}]")
            for key, val in cp.items(section):
                if key not in _KEYS[section]:
                    lineno = next((n for n, ln in enumerate(lines, 1)
                                   if re.match(rf"\s*{re.escape(key)}\s*[=:]", ln)), "?")
                    raise ConfigError(f"{src}:{lineno}: unknown key {key!r} in [{section}]")
                values[key] = val
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    for key, val in values.items():
        conv = _CONVERT.get(key)
        try:
            setattr(cfg, key, conv(val) if conv and isinstance(val, str) else val)
        except ValueError:
            raise ConfigError(f"invalid value {val!r} for key {key!r}") from None
    if cfg.mode not in ("solve", "adapt", "audit", "reference", "mesh-info"):
        raise ConfigError(f"invalid value {cfg.mode!r} for key 'mode'")
    parse_marking(cfg.marking)
    parse_target(cfg.target)
    if not 0 < cfg.theta < 1:
        raise ConfigError("invalid value for key 'theta': must lie in (0, 1)")
    if cfg.ties not in ("lowest-id", "complete"):
        raise ConfigError(f"invalid value {cfg.ties!r} for key 'ties'")
    if cfg.indicator not in ("combined", "mu"):
        raise ConfigError(f"invalid value {cfg.indicator!r} for key 'indicator'")
    if cfg.weights not in ("uniform", "area"):
        raise ConfigError(f"invalid value {cfg.weights!r} for key 'weights'")
    if cfg.nev < 1:
        raise ConfigError("invalid value for key 'nev': must be >= 1")
    make_domain_check(cfg.domain)
    return cfg


def make_domain_check(domain: str):
    d = domain.strip()
    if _SQUARE.match(d) or d == "square_ring":
        return
    if d.startswith("file:"):
        if not Path(d[5:]).exists():
            raise ConfigError(f"invalid value for key 'domain': file {d[5:]} does not exist")
        return
    raise ConfigError(f"invalid value {domain!r} for key 'domain'")


# -- run ----------------------------------------------------------------------------

class _Outputs:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def add(self, paths):
        self.files.extend(paths)

    def manifest(self, cfg: RunConfig, extra: dict | None = None) -> Path:
        entries = []
        for p in sorted(set(self.files)):
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            entries.append({"path": p.relative_to(self.root).as_posix(), "sha256": digest})
        data = {"version": __version__, "config": _jsonable(asdict(cfg)), "seed": cfg.seed,
                "files": entries}
        if extra:
            data.update(extra)
        mp = self.root / "manifest.json"
        mp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        return mp


def _jsonable(d):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def run(cfg: RunConfig) -> dict:
    """Execute one run; raise :class:`NumericalFailure` on solver failure."""
    handler = {"solve": _run_solve, "adapt": _run_adapt, "audit": _run_audit,
               "reference": _run_reference, "mesh-info": _run_mesh_info}[cfg.mode]
    return handler(cfg)


def _run_mesh_info(cfg):
    mesh = make_domain(cfg.domain)
    info = {
        "domain": cfg.domain,
        "vertices": mesh.n_vertices,
        "triangles": mesh.n_triangles,
        "edges": mesh.n_edges,
        "boundary_edges": int(mesh.boundary_edges.sum()),
        "interior_edges": int((~mesh.boundary_edges).sum()),
        "interior_vertices": int((~mesh.boundary_vertices).sum()),
        "holes": mesh.holes,
        "area": mesh.area,
        "perimeter": perimeter(mesh),
        "min_angle_deg": min_angle_degrees(mesh),
        "max_diameter": float(mesh.diameters.max()),
        "problems": check_invariants(mesh),
    }
    return info


def _run_solve(cfg):
    out = _Outputs(cfg.out)
    mesh = make_domain(cfg.domain)
    pair = SpacePair(mesh)
    try:
        cr = smallest_eigenpairs(pair.cr.stiffness, pair.cr.mass, cfg.nev, tol=cfg.tol,
                                 seed=cfg.seed, factor=pair.cr.factor, space="CR")
        conf = smallest_eigenpairs(pair.p1.stiffness, pair.p1.mass, min(cfg.nev, pair.p1.ndof),
                                   tol=cfg.tol, seed=cfg.seed, factor=pair.p1.factor, space="P1")
    except (EigenSolverError, ValueError) as exc:
        raise NumericalFailure(str(exc)) from exc
    rows = []
    for k in range(cfg.nev):
        lc = float(conf.values[k]) if k < len(conf) else float("nan")
        rows.append((k + 1, float(cr.values[k]), lc, float(cr.residuals[k])))
    _write_rows(out.path("spectra.csv"), ["index", "lambda_cr", "lambda_conforming",
                                          "residual_cr"], rows)
    for k in range(cfg.nev):
        f = compute_indicators(pair.cr, cr.vectors[:, k], cr.values[k], k, cfg.weights, pair.p1)
        write_indicator_csv(out.path(f"indicators/eig_{k + 1}.csv"), f)
    save_mesh(mesh, out.path("mesh.txt"))
    out.manifest(cfg)
    return {"values": cr.values.tolist(), "conforming": conf.values.tolist()}


def _run_adapt(cfg, audit_reference=None):
    out = _Outputs(cfg.out)
    mesh0 = make_domain(cfg.domain)
    acfg = cfg.adapt_config()
    ref = cfg.resolved_reference()
    swaps = []
    audits = []

    def callback(state):
        it = state.iteration
        save_mesh(state.mesh, out.path(f"meshes/mesh_{it:03d}.txt"))
        for k, f in state.fields.items():
            write_indicator_csv(out.path(f"indicators/iter_{it:03d}_eig_{k + 1}.csv"), f)
        if state.record.swap is not None:
            S = state.record.swap
            swaps.extend((it, a + 1, b + 1, float(S[a, b]))
                         for a in range(S.shape[0]) for b in range(S.shape[1]))
        if audit_reference is not None:
            members = [k - 1 for k in state.record.cluster]
            res = audit_bounds(state.pair, state.cr, state.conforming, members,
                               audit_reference,
                               [state.fields[k].mu2_total for k in members],
                               [state.fields[k].eta2_total for k in members])
            audits.append((it, res))

    res: AdaptResult = adaptive_loop(mesh0, acfg, callback)
    write_records_csv(out.path("records.csv"), res.records, cfg.nev)
    _write_rows(out.path("conforming.csv"),
                ["iter", "ndof_conforming"] + [f"lambda_c_{k}" for k in range(1, cfg.nev + 1)],
                [[r.iteration, r.ndof_conforming] + [float(x) for x in r.conforming_eigenvalues]
                 for r in res.records])
    _write_rows(out.path("gaps.csv"), ["iter", "k", "gap_vc", "mu_over_sqrt_lambda"],
                [(r.iteration, k, float(g), float(b)) for r in res.records
                 for k, g, b in zip(r.cluster, r.member_gaps, r.member_bounds)])
    _write_rows(out.path("clusters.csv"), ["iter", "target", "detected"],
                [(r.iteration, " ".join(map(str, r.cluster)),
                  " | ".join(" ".join(map(str, c)) for c in r.clusters)) for r in res.records])
    if swaps:
        _write_rows(out.path("swap.csv"), ["iter", "k_new", "k_old", "gap"], swaps)
    if ref is not None:
        _write_rows(out.path("effectivity.csv"),
                    ["iter", "ndof", "error", "mu2_cluster", "effectivity"],
                    effectivity(res.records, ref))
    if res.records:
        out.add(emit_plot_data(res.records, ref, out.root / "plots"))
    if cfg.figures and res.records:
        from .plotting import render_adapt_figures
        out.add(render_adapt_figures(res.records, ref, out.root / "figures"))
    if audits:
        write_audit_csv(out.path("audit.csv"), [(it, r.rows) for it, r in audits])
        notices = [(it, r.case, r.notice) for it, r in audits if r.notice]
        if notices:
            _write_rows(out.path("audit_notices.csv"), ["iter", "case", "notice"], notices)
    out.manifest(cfg, {"reference": ref, "error": res.error,
                       "note": "cluster detection is a relative-gap heuristic"})
    if res.error:
        raise NumericalFailure(res.error)
    return {"records": res.records, "result": res, "reference": ref, "audits": audits}


def _run_audit(cfg):
    ref = cfg.resolved_reference()
    if ref is None:
        raise ConfigError("audit needs a reference value (key 'reference')")
    if not _SQUARE.match(cfg.domain.strip()):
        return _run_adapt(cfg, audit_reference=ref)
    # uniform sweep with analytic references
    out = _Outputs(cfg.out)
    k, q = parse_target(cfg.target)
    q = q or 1
    members = list(range(k - 1, k - 1 + q))
    nev = max(cfg.nev, members[-1] + 1)
    rows_by_iter = []
    notices = []
    for it, n in enumerate(cfg.sizes):
        pair = SpacePair(make_unit_square(n))
        try:
            cr = smallest_eigenpairs(pair.cr.stiffness, pair.cr.mass, nev, tol=cfg.tol,
                                     seed=cfg.seed, factor=pair.cr.factor)
            conf = smallest_eigenpairs(pair.p1.stiffness, pair.p1.mass, nev, tol=cfg.tol,
                                       seed=cfg.seed, factor=pair.p1.factor)
        except (EigenSolverError, ValueError) as exc:
            raise NumericalFailure(str(exc)) from exc
        fields = [compute_indicators(pair.cr, cr.vectors[:, j], cr.values[j], j, cfg.weights,
                                     pair.p1) for j in members]
        res = audit_bounds(pair, cr, conf, members, ref, [f.mu2_total for f in fields],
                           [f.eta2_total for f in fields])
        rows_by_iter.append((it, res.rows))
        if res.notice:
            notices.append((it, res.case, res.notice))
    write_audit_csv(out.path("audit.csv"), rows_by_iter)
    if notices:
        _write_rows(out.path("audit_notices.csv"), ["iter", "case", "notice"], notices)
    out.manifest(cfg, {"reference": ref})
    return {"rows": rows_by_iter, "reference": ref}


def _run_reference(cfg):
    out = _Outputs(cfg.out)
    mesh = make_domain(cfg.domain)
    try:
        seq, est = uniform_reference(mesh, cfg.levels, cfg.nev, cfg.seed, cfg.start)
    except (EigenSolverError, ValueError) as exc:
        raise NumericalFailure(str(exc)) from exc
    _write_rows(out.path("reference.csv"), ["index", "value", "residual"],
                [(k + 1, e.value, e.residual) for k, e in enumerate(est)])
    _write_rows(out.path("reference_sequence.csv"),
                ["level", "ndof_conforming"] + [f"lambda_c_{k}" for k in range(1, cfg.nev + 1)],
                [[lev, nd] + [float(x) for x in v] for lev, (nd, v) in enumerate(seq)])
    out.manifest(cfg)
    return {"estimates": est, "sequence": seq}
