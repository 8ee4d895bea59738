"""SOLVE -> ESTIMATE -> MARK -> REFINE for (possibly multiple) eigenvalues."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .eigensolve import EigenSolverError, SpectralSet, smallest_eigenpairs
from .estimators import IndicatorField, compute_indicators
from .mesh import TriMesh, refine
from .subspace import SpacePair, SubspaceBasis, gap_to_conforming, subspace_gap

__all__ = [
    "Cluster",
    "AdaptConfig",
    "AdaptRecord",
    "AdaptResult",
    "IterationState",
    "detect_clusters",
    "dorfler_mark",
    "cluster_indicator",
    "prolongate_p1",
    "adaptive_loop",
    "write_records_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cluster:
    """Contiguous 0-based indices of eigenvalues treated as one multiple value."""

    members: tuple
    values: tuple
    rtol: float

    def __len__(self):
        return len(self.members)

    def __contains__(self, k):
        return k in self.members


def detect_clusters(values, rtol: float) -> list[Cluster]:
    """Split an ascending spectrum where the relative gap exceeds ``rtol``.

    This is a heuristic: nothing identifies which discrete values belong to
    one continuous eigenvalue.
    """
    values = [float(v) for v in values]
    out, cur = [], [0] if values else []
    for k in range(1, len(values)):
        if (values[k] - values[k - 1]) / values[k - 1] <= rtol:
            cur.append(k)
        else:
            out.append(cur)
            cur = [k]
    if cur:
        out.append(cur)
    return [Cluster(tuple(c), tuple(values[k] for k in c), rtol) for c in out]


def dorfler_mark(indicators, theta: float, ties: str = "lowest-id") -> np.ndarray:
    """Smallest set carrying a ``theta`` fraction of the total indicator.

    Greedy on descending values, ties broken by ascending element id.  With
    ``ties="complete"`` every element whose value equals (to 1e-10 relative)
    the last one taken is marked as well; the set is then no longer minimal
    but it keeps every symmetry of the indicator.  Returns sorted element ids.
    """
    ind = np.asarray(indicators, float)
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    if np.any(ind < 0):
        raise ValueError("indicators must be nonnegative")
    if ties not in ("lowest-id", "complete"):
        raise ValueError(f"unknown tie rule {ties!r}")
    total = float(ind.sum())
    if total <= 0:
        return np.empty(0, np.int64)
    order = np.lexsort((np.arange(ind.size), -ind))
    csum = np.cumsum(ind[order])
    n = min(int(np.searchsorted(csum, theta * total - 1e-14 * total)) + 1, ind.size)
    if ties == "complete":
        last = ind[order[n - 1]]
        n = int(np.count_nonzero(ind >= last * (1 - 1e-10)))
    return np.sort(order[:n])


def cluster_indicator(fields, combined: bool = True) -> np.ndarray:
    """Elementwise sum of ``mu^2 (+ eta^2)`` over the cluster members."""
    fields = list(fields)
    if not fields:
        raise ValueError("no indicator fields")
    n = len(fields[0].mu2)
    if any(len(f.mu2) != n or len(f.eta2) != n for f in fields):
        raise ValueError("indicator fields live on different meshes")
    if combined:
        return np.sum([f.mu2 + f.eta2 for f in fields], axis=0)
    return np.sum([f.mu2 for f in fields], axis=0)


@dataclass
class AdaptConfig:
    """Parameters of the adaptive loop.

    ``target`` is ``(k, q)``: 1-based index of the first eigenvalue of the
    cluster and its multiplicity, or ``q=None`` to detect the cluster that
    contains ``k`` at every iteration.  ``marking`` is ``"cluster"`` or
    ``("single", k)`` with a 1-based ``k``.
    """

    theta: float = 0.5
    target: tuple = (2, 2)
    marking: object = "cluster"
    max_dof: int = 50_000
    nev: int = 3
    cluster_rtol: float = 0.02
    seed: int = 0
    indicator: str = "combined"
    weights: str = "uniform"
    tol: float = 1e-9
    max_iter: int = 200
    record_time: bool = True
    swap_diagnostic: bool = True
    ties: str = "lowest-id"

    def validate(self, initial_dof: int | None = None):
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        k, q = self.target
        if k < 1 or (q is not None and (q < 1 or k + q - 1 > self.nev)):
            raise ValueError(f"target {self.target} does not fit in nev={self.nev}")
        if self.marking != "cluster":
            kind, j = self.marking
            if kind != "single" or not 1 <= j <= self.nev:
                raise ValueError(f"invalid marking {self.marking!r}")
        if self.ties not in ("lowest-id", "complete"):
            raise ValueError(f"invalid tie rule {self.ties!r}")
        if self.indicator not in ("combined", "mu"):
            raise ValueError(f"invalid indicator {self.indicator!r}")

    @property
    def marking_label(self) -> str:
        return "cluster" if self.marking == "cluster" else f"single:{self.marking[1]}"


@dataclass
class AdaptRecord:
    iteration: int
    ndof: int
    ndof_conforming: int
    n_triangles: int
    eigenvalues: np.ndarray
    conforming_eigenvalues: np.ndarray
    cluster: tuple
    clusters: list
    mu2: np.ndarray
    eta2: np.ndarray
    marked: int
    gap_vc: float
    member_gaps: np.ndarray
    member_bounds: np.ndarray
    swap: np.ndarray | None = None
    seconds: float = 0.0

    @property
    def mu2_cluster(self) -> float:
        return float(np.sum(self.mu2))

    @property
    def eta2_cluster(self) -> float:
        return float(np.sum(self.eta2))


@dataclass
class IterationState:
    """Everything computed on one mesh; passed to the loop callback."""

    iteration: int
    mesh: TriMesh
    pair: SpacePair
    cr: SpectralSet
    conforming: SpectralSet
    fields: dict
    record: AdaptRecord
    marked: np.ndarray | None = None


@dataclass
class AdaptResult:
    records: list
    mesh: TriMesh
    cr: SpectralSet | None
    conforming: SpectralSet | None
    error: str | None = None
    fields: dict = field(default_factory=dict)


def prolongate_p1(old_mesh: TriMesh, new_mesh: TriMesh, nodal_old) -> np.ndarray:
    """Nodal values of a P1 function after one :func:`refine` call."""
    nodal_old = np.asarray(nodal_old, float)
    out = np.zeros(new_mesh.n_vertices)
    n = old_mesh.n_vertices
    out[:n] = nodal_old
    vp = new_mesh.vertex_parents[n:]
    out[n:] = 0.5 * (nodal_old[vp[:, 0]] + nodal_old[vp[:, 1]])
    return out


def _target_members(cfg: AdaptConfig, clusters) -> tuple:
    k, q = cfg.target
    if q is not None:
        return tuple(range(k - 1, k - 1 + q))
    for c in clusters:
        if k - 1 in c:
            return c.members
    return (k - 1,)


def _swap_matrix(prev, pair, cr):
    """Gap between every new CR eigenvector and every old one.

    Old eigenvectors are carried over through their conforming
    postprocessing, which is nested under bisection.
    """
    from .fem import postprocess_average

    old_pair, old_cr = prev
    n = cr.vectors.shape[1]
    m = old_cr.vectors.shape[1]
    S = np.full((n, m), np.nan)
    olds = []
    for b in range(m):
        ut = postprocess_average(old_pair.cr, old_cr.vectors[:, b], p1=old_pair.p1)
        nodal = prolongate_p1(old_pair.mesh, pair.mesh, old_pair.p1.nodal_values(ut))
        olds.append(SubspaceBasis.from_p1(pair, nodal[pair.p1.free_vertices]))
    for a in range(n):
        Ea = SubspaceBasis(cr.vectors[:, a], pair)
        for b in range(m):
            S[a, b] = subspace_gap(Ea, olds[b])
    return S


def adaptive_loop(mesh0: TriMesh, config: AdaptConfig,
                  callback: Callable[[IterationState], None] | None = None) -> AdaptResult:
    """Run the adaptive loop until the CR space has at least ``max_dof`` DOFs."""
    cfg = config
    mesh = mesh0
    records = []
    prev = None
    cr = conf = None
    fields = {}
    for it in range(cfg.max_iter + 1):
        t0 = time.perf_counter()
        pair = SpacePair(mesh)
        if it == 0:
            cfg.validate(pair.cr.ndof)
        try:
            cr = smallest_eigenpairs(pair.cr.stiffness, pair.cr.mass, cfg.nev, tol=cfg.tol,
                                     seed=cfg.seed, factor=pair.cr.factor, space="CR")
            conf = smallest_eigenpairs(pair.p1.stiffness, pair.p1.mass,
                                       min(cfg.nev, pair.p1.ndof), tol=cfg.tol,
                                       seed=cfg.seed, factor=pair.p1.factor, space="P1")
        except (EigenSolverError, ValueError) as exc:
            log.error("iteration %d: eigensolver failed: %s", it, exc)
            return AdaptResult(records, mesh, cr, conf, f"eigensolver: {exc}", fields)

        clusters = detect_clusters(cr.values, cfg.cluster_rtol)
        members = _target_members(cfg, clusters)
        wanted = set(members)
        if cfg.marking != "cluster":
            wanted.add(cfg.marking[1] - 1)
        fields = {k: compute_indicators(pair.cr, cr.vectors[:, k], cr.values[k], k,
                                        cfg.weights, pair.p1) for k in sorted(wanted)}
        combined = cfg.indicator == "combined"
        if cfg.marking == "cluster":
            ind = cluster_indicator([fields[k] for k in members], combined)
        else:
            ind = cluster_indicator([fields[cfg.marking[1] - 1]], combined)

        gap = gap_to_conforming(SubspaceBasis(cr.vectors[:, list(members)], pair))
        mgaps = np.array([gap_to_conforming(SubspaceBasis(cr.vectors[:, k], pair))
                          for k in members])
        mbounds = np.array([np.sqrt(fields[k].mu2_total / cr.values[k]) for k in members])
        swap = _swap_matrix(prev, pair, cr) if (prev is not None and cfg.swap_diagnostic) else None

        done = pair.cr.ndof >= cfg.max_dof or it == cfg.max_iter
        marked = None if done else dorfler_mark(ind, cfg.theta, cfg.ties)
        rec = AdaptRecord(
            iteration=it, ndof=pair.cr.ndof, ndof_conforming=pair.p1.ndof,
            n_triangles=mesh.n_triangles, eigenvalues=cr.values.copy(),
            conforming_eigenvalues=conf.values.copy(),
            cluster=tuple(k + 1 for k in members),
            clusters=[tuple(k + 1 for k in c.members) for c in clusters],
            mu2=np.array([fields[k].mu2_total for k in members]),
            eta2=np.array([fields[k].eta2_total for k in members]),
            marked=0 if marked is None else int(marked.size),
            gap_vc=gap, member_gaps=mgaps, member_bounds=mbounds, swap=swap,
            seconds=time.perf_counter() - t0 if cfg.record_time else 0.0)
        records.append(rec)
        log.info("iter %d ndof %d lambda %s marked %d", it, rec.ndof,
                 np.array2string(cr.values, precision=6), rec.marked)
        if callback is not None:
            callback(IterationState(it, mesh, pair, cr, conf, fields, rec, marked))
        if done or marked.size == 0:
            break
        prev = (pair, cr)
        mesh = refine(mesh, marked)
    return AdaptResult(records, mesh, cr, conf, None, fields)


def write_records_csv(path, records, nev: int) -> None:
    """``iter,ndof,lambda_1..nev,mu2_cluster,eta2_cluster,marked,gap_vc,seconds``."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "ndof"] + [f"lambda_{k}" for k in range(1, nev + 1)]
                   + ["mu2_cluster", "eta2_cluster", "marked", "gap_vc", "seconds"])
        for r in records:
            w.writerow([r.iteration, r.ndof] + [repr(float(x)) for x in r.eigenvalues]
                       + [repr(r.mu2_cluster), repr(r.eta2_cluster), r.marked,
                          repr(float(r.gap_vc)), repr(float(r.seconds))])
