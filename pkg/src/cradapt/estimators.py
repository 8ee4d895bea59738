"""Residual-free a posteriori indicators for CR eigenfunctions.

For a discrete eigenpair ``(lam, u)`` on a CR space::

    mu2[K]  = || grad(u_tilde) - grad_h(u) ||^2_{L2(K)}
    eta2[K] = h_K^2 * lam^2 * || u ||^2_{L2(K)}

where ``u_tilde`` is the vertex-averaged conforming postprocessing of ``u``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .fem import CRSpace, P1Space, postprocess_average
from .mesh import TriMesh, uniform_refine

__all__ = [
    "IndicatorField",
    "EffectivityRecord",
    "EfficiencyReport",
    "FineReference",
    "compute_mu",
    "compute_eta",
    "compute_indicators",
    "gap_bound",
    "fine_reference",
    "efficiency_check",
    "write_indicator_csv",
]


@dataclass
class IndicatorField:
    """Per-element squared indicators of one eigenfunction."""

    index: int
    mu2: np.ndarray
    eta2: np.ndarray
    value: float = float("nan")

    @property
    def mu2_total(self) -> float:
        return float(np.sum(self.mu2))

    @property
    def eta2_total(self) -> float:
        return float(np.sum(self.eta2))

    @property
    def combined(self) -> np.ndarray:
        return self.mu2 + self.eta2


@dataclass(frozen=True)
class EffectivityRecord:
    cluster: tuple
    error: float
    indicator: float

    @property
    def effectivity(self) -> float:
        return self.error / self.indicator if self.indicator > 0 else float("inf")


def _elementwise_mu2(space: CRSpace, u, weights, p1):
    if p1 is None:
        p1 = P1Space(space.mesh)
    ut = postprocess_average(space, u, weights, p1)
    diff = p1.gradients(ut) - space.gradients(u)
    return space.mesh.signed_areas * np.einsum("kd,kd->k", diff, diff)


def compute_mu(space: CRSpace, u, weights: str = "uniform", p1=None) -> np.ndarray:
    """Per-element ``mu^2``; both gradients are elementwise constant."""
    return _elementwise_mu2(space, np.asarray(u, float), weights, p1)


def compute_eta(space: CRSpace, u, value: float) -> np.ndarray:
    """Per-element ``eta^2`` using the diagonal CR mass (exact for quadratics)."""
    loc = space.local_coefficients(np.asarray(u, float))
    l2 = space.mesh.signed_areas / 3.0 * np.einsum("ki,ki->k", loc, loc)
    return space.mesh.diameters ** 2 * value ** 2 * l2


def compute_indicators(space: CRSpace, u, value: float, index: int = 0,
                       weights: str = "uniform", p1=None) -> IndicatorField:
    return IndicatorField(index, compute_mu(space, u, weights, p1),
                          compute_eta(space, u, value), float(value))


def gap_bound(space: CRSpace, u, value: float, weights: str = "uniform",
              p1=None) -> tuple[float, float]:
    """Computable bounds on the gap between ``span(u)`` and H^1_0.

    Returns ``(mu/lam, mu/sqrt(lam))``.  The second form is the one that
    follows from ``||u||_h = sqrt(lam)`` for an L2-normalised eigenvector.
    """
    mu = np.sqrt(compute_mu(space, u, weights, p1).sum())
    return float(mu / value), float(mu / np.sqrt(value))


# -- efficiency ------------------------------------------------------------

@dataclass
class FineReference:
    """A reference function given by its elementwise gradients on a fine mesh.

    ``ancestor[f]`` is the coarse triangle containing fine triangle ``f``.
    """

    mesh: TriMesh
    ancestor: np.ndarray
    gradients: np.ndarray
    info: dict = field(default_factory=dict)


def _descend(coarse: TriMesh, sweeps: int):
    fine = coarse
    anc = np.arange(coarse.n_triangles)
    for _ in range(sweeps):
        fine = uniform_refine(fine, 1)
        anc = anc[fine.parent]
    return fine, anc


def fine_reference(space: CRSpace, u, cluster_size: int = 1, index: int = 0,
                   sweeps: int = 2, nev: int | None = None, seed: int = 0) -> FineReference:
    """Fine-mesh stand-in for the best continuous eigenspace element.

    Conforming P1 eigenvectors are computed on the mesh bisected ``sweeps``
    times; ``u`` is energy-projected onto the span of the ``cluster_size``
    eigenvectors starting at ``index`` (0-based).
    """
    from .eigensolve import smallest_eigenpairs

    fine, anc = _descend(space.mesh, sweeps)
    p1 = P1Space(fine)
    nev = nev or index + cluster_size
    S = smallest_eigenpairs(p1.stiffness, p1.mass, nev, seed=seed, factor=p1.factor)
    basis = S.vectors[:, index:index + cluster_size]
    area = fine.signed_areas
    gb = np.stack([p1.gradients(basis[:, k]) for k in range(basis.shape[1])], axis=-1)
    gu = space.gradients(u)[anc]
    # energy-orthogonal projection of u onto span(basis)
    G = np.einsum("f,fdi,fdj->ij", area, gb, gb)
    rhs = np.einsum("f,fdi,fd->i", area, gb, gu)
    coef = np.linalg.solve(G, rhs)
    return FineReference(fine, anc, gb @ coef,
                         {"values": S.values[index:index + cluster_size].tolist(),
                          "sweeps": sweeps})


@dataclass
class EfficiencyReport:
    ratios: np.ndarray
    mu: np.ndarray
    local_error: np.ndarray
    exact_match: bool = False

    @property
    def max_ratio(self) -> float:
        if self.exact_match:
            return 0.0
        r = self.ratios[np.isfinite(self.ratios)]
        return float(r.max()) if r.size else float("nan")


def efficiency_check(space: CRSpace, u, reference: FineReference | None,
                     weights: str = "uniform") -> EfficiencyReport | None:
    """Elementwise ratio ``mu_K / ||grad_h(u_ref - u)||_{L2(K*)}``.

    ``K*`` is the union of elements sharing a vertex with ``K``.  Returns
    ``None`` when no reference is available.  Elements where both sides
    vanish get ``nan``; if that holds everywhere ``exact_match`` is set.
    """
    if reference is None:
        return None
    mesh = space.mesh
    mu = np.sqrt(compute_mu(space, u, weights))
    gu = space.gradients(u)[reference.ancestor]
    d = reference.gradients - gu
    err2_f = reference.mesh.signed_areas * np.einsum("fd,fd->f", d, d)
    err2 = np.bincount(reference.ancestor, weights=err2_f, minlength=mesh.n_triangles)
    # K*: elements sharing a vertex with K
    t = mesh.triangles
    B = sp.csr_matrix((np.ones(t.size), (t.ravel(), np.repeat(np.arange(len(t)), 3))),
                      shape=(mesh.n_vertices, len(t)))
    S = (B.T @ B).tocsr()
    S.data[:] = 1.0
    star = S @ err2
    local = np.sqrt(star)
    # "zero" is judged against the energy of u itself
    g = space.gradients(u)
    scale = float(np.sqrt(np.sum(mesh.signed_areas * np.einsum("kd,kd->k", g, g))))
    tiny = 1e-10 * scale
    both_zero = (mu <= tiny) & (local <= tiny)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(both_zero, np.nan, mu / local)
    return EfficiencyReport(ratios, mu, local, bool(both_zero.all()))


def write_indicator_csv(path, field: IndicatorField) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["elem_id", "mu2", "eta2"])
        for k, (a, b) in enumerate(zip(field.mu2.tolist(), field.eta2.tolist())):
            w.writerow([k, repr(a), repr(b)])
