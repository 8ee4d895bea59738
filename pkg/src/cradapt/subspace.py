"""Energy-norm geometry of discrete eigenspaces.

Everything lives in the CR space of one mesh: conforming P1 functions are
embedded by their edge-midpoint values, which is an exact inclusion, and the
broken energy form ``a_h`` is the common inner product.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as la

from .fem import CRSpace, P1Space, p1_to_cr, solve_source
from .mesh import TriMesh

__all__ = [
    "SpacePair",
    "SubspaceBasis",
    "BoundAuditRow",
    "DegenerateBasisError",
    "elliptic_project_to_conforming",
    "elliptic_project_to_span",
    "energy_orthonormalize",
    "subspace_gap",
    "gap_to_conforming",
    "rayleigh",
    "projection_norm",
    "classify_case",
    "audit_bounds",
    "write_audit_csv",
]

GRAM_COND_MAX = 1e12


class DegenerateBasisError(ValueError):
    pass


class SpacePair:
    """CR and P1 spaces on the same mesh plus the inclusion P1 -> CR."""

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        self.cr = CRSpace(mesh)
        self.p1 = P1Space(mesh)

    @cached_property
    def embed(self):
        return p1_to_cr(self.cr, self.p1)

    def to_cr(self, x):
        """Embed P1 coefficients (vector or columns) into CR coordinates."""
        return self.embed @ np.asarray(x, float)


@dataclass
class SubspaceBasis:
    """Columns of ``vectors`` span the subspace, in CR coordinates of ``pair``."""

    vectors: np.ndarray
    pair: SpacePair
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, float)
        if v.ndim == 1:
            v = v[:, None]
        self.vectors = v

    @classmethod
    def from_p1(cls, pair: SpacePair, vectors, label: str = ""):
        v = np.asarray(vectors, float)
        if v.ndim == 1:
            v = v[:, None]
        return cls(pair.to_cr(v), pair, label)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def gram(self) -> np.ndarray:
        G = self.vectors.T @ (self.pair.cr.stiffness @ self.vectors)
        return 0.5 * (G + G.T)


def energy_orthonormalize(basis: SubspaceBasis) -> np.ndarray:
    """Energy-orthonormal columns spanning ``basis``."""
    G = basis.gram
    w, V = la.eigh(G)
    if w.size == 0 or w[0] <= 0 or w[-1] / w[0] > GRAM_COND_MAX:
        cond = np.inf if w.size == 0 or w[0] <= 0 else w[-1] / w[0]
        raise DegenerateBasisError(
            f"basis {basis.label or '<unnamed>'} is degenerate (Gram condition {cond:.2e})")
    return basis.vectors @ (V / np.sqrt(w))


def _energy_norm_max(pair: SpacePair, R) -> float:
    G = R.T @ (pair.cr.stiffness @ R)
    top = la.eigvalsh(0.5 * (G + G.T))[-1] if G.size else 0.0
    return float(np.sqrt(max(top, 0.0)))


def elliptic_project_to_conforming(pair: SpacePair, v) -> np.ndarray:
    """P1 coefficients of the projection with ``a(Pv, w) = a_h(v, w)`` on Vc."""
    v = np.asarray(v, float)
    rhs = pair.embed.T @ (pair.cr.stiffness @ v)
    return pair.p1.factor.solve(np.asfortranarray(rhs))


def elliptic_project_to_span(v, basis: SubspaceBasis) -> np.ndarray:
    """Coefficients ``c`` with ``a_h(v - B c, b) = 0`` for every column ``b``."""
    G = basis.gram
    w = la.eigvalsh(G)
    if w[0] <= 0 or w[-1] / w[0] > GRAM_COND_MAX:
        raise DegenerateBasisError(
            f"basis {basis.label or '<unnamed>'} is near singular")
    rhs = basis.vectors.T @ (basis.pair.cr.stiffness @ np.asarray(v, float))
    return la.solve(G, rhs, assume_a="pos")


def subspace_gap(E: SubspaceBasis, F: SubspaceBasis) -> float:
    """``sup_{u in E, ||u||_h=1} inf_{v in F} ||u - v||_h``."""
    X = energy_orthonormalize(E)
    Y = energy_orthonormalize(F)
    A = E.pair.cr.stiffness
    C = Y.T @ (A @ X)
    return min(_energy_norm_max(E.pair, X - Y @ C), 1.0)


def gap_to_conforming(E: SubspaceBasis) -> float:
    """Gap from ``E`` to the whole conforming space Vc."""
    pair = E.pair
    X = energy_orthonormalize(E)
    R = X - pair.to_cr(elliptic_project_to_conforming(pair, X))
    return min(_energy_norm_max(pair, R), 1.0)


def projection_norm(E: SubspaceBasis, F: SubspaceBasis) -> float:
    """``||Q_F P_E||`` for the energy-orthogonal projections onto F and E."""
    X = energy_orthonormalize(E)
    Y = energy_orthonormalize(F)
    C = Y.T @ (E.pair.cr.stiffness @ X)
    return float(la.svdvals(C)[0]) if C.size else 0.0


def rayleigh(space, v) -> float:
    v = np.asarray(v, float)
    den = float(v @ (space.mass @ v))
    if den <= 0:
        raise ValueError("Rayleigh quotient of the zero vector")
    return float(v @ (space.stiffness @ v)) / den


# -- bound audit -------------------------------------------------------------

@dataclass(frozen=True)
class BoundAuditRow:
    """One audited inequality ``lhs <= C * rhs``; ``ratio = lhs / rhs``."""

    j: int
    case: str
    bound: str
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        if self.rhs == 0:
            return 0.0 if self.lhs == 0 else float("inf")
        return self.lhs / self.rhs


@dataclass
class AuditResult:
    case: str
    rows: list
    notice: str = ""
    diagnostics: dict = field(default_factory=dict)


def classify_case(values, reference: float) -> str:
    values = np.asarray(values, float)
    if np.all(values <= reference):
        return "below"
    if np.all(values >= reference):
        return "above"
    return "mixed"


def audit_bounds(pair: SpacePair, cr_spec, conf_spec, cluster, reference: float,
                 mu2=None, eta2=None) -> AuditResult:
    """Evaluate the eigenvalue error bounds for one cluster.

    ``cluster`` holds contiguous 0-based indices into both spectra; ``mu2`` and
    ``eta2`` are the global squared indicators of the cluster members (in
    cluster order).  Below the reference the projection bound and the
    indicator bound are audited; above it the averaged bound is.
    """
    if conf_spec is None:
        raise ValueError("the conforming spectrum is required for the audit")
    cluster = [int(k) for k in cluster]
    i = cluster[0]
    lam = np.asarray(cr_spec.values, float)
    lamc = np.asarray(conf_spec.values, float)
    vals = lam[cluster]
    case = classify_case(vals, reference)
    if case == "mixed":
        return AuditResult(case, [], "cluster straddles the reference value; "
                                     "the bounds do not apply to mixed approximation")
    if mu2 is None:
        raise ValueError("indicator totals are required")
    mu2 = np.asarray(mu2, float)
    eta2 = np.zeros_like(mu2) if eta2 is None else np.asarray(eta2, float)
    rows = []
    diag = {}
    if case == "below":
        lower = None
        if i > 0:
            lower = SubspaceBasis.from_p1(pair, conf_spec.vectors[:, :i], "conforming 1..i-1")
        for n, j in enumerate(cluster):
            E = SubspaceBasis(cr_spec.vectors[:, i:j + 1], pair, f"E_{i + 1}..{j + 1}")
            lhs = (reference - lam[j]) / reference
            gap = gap_to_conforming(E)
            cross = projection_norm(E, lower) if lower is not None else 0.0
            rows.append(BoundAuditRow(j + 1, case, "projection", lhs, gap ** 2 + cross ** 2))
            ind = float(np.sum(mu2[:n + 1] / lam[i:j + 1] ** 2))
            rows.append(BoundAuditRow(j + 1, case, "indicator", lhs, ind))
            rows.append(BoundAuditRow(j + 1, case, "gap", gap ** 2, ind))
            if lower is not None and i < len(lamc):
                kn = _cross_projection_constants(pair, lower, lam, lamc, i, j, cluster)
                diag[j + 1] = kn
                if kn["beta"] > 0:
                    rows.append(BoundAuditRow(j + 1, case, "cross_projection", cross,
                                              kn["operator_norm"] / kn["beta"] * gap))
    else:
        for n, j in enumerate(cluster):
            J = n + 1
            lhs = float(np.mean(lam[i:j + 1])) - reference
            rhs = float(np.sum(6 * mu2[:J] + 4 * eta2[:J])) / J
            rows.append(BoundAuditRow(j + 1, case, "average", lhs, rhs))
            spread = float(np.sum(lam[j] - lam[i:j])) / J
            rows.append(BoundAuditRow(j + 1, case, "relative",
                                      (lam[j] - reference) / reference,
                                      (rhs + spread) / reference))
    return AuditResult(case, rows, "", diag)


def _cross_projection_constants(pair, lower, lam, lamc, i, j, cluster):
    """Constants of the cross-projection estimate (diagnostic only)."""
    W = energy_orthonormalize(lower)
    TW = np.column_stack([solve_source(pair.cr, W[:, k]) for k in range(W.shape[1])])
    R = TW - pair.to_cr(elliptic_project_to_conforming(pair, TW))
    opnorm = _energy_norm_max(pair, R)
    d = abs(1.0 / lamc[i - 1] - 1.0 / lam[j])
    last = cluster[-1]
    delta = (lam[last] - lam[i]) / (lam[i] * lam[last])
    return {"operator_norm": opnorm, "d": d, "delta": delta, "beta": d - delta}


def write_audit_csv(path, rows_by_iter) -> None:
    """``rows_by_iter`` is an iterable of ``(iter, [BoundAuditRow, ...])``."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "case", "j", "lhs", "rhs", "ratio", "bound"])
        for it, rows in rows_by_iter:
            for r in rows:
                w.writerow([it, r.case, r.j, repr(float(r.lhs)), repr(float(r.rhs)),
                             repr(float(r.ratio)), r.bound])
