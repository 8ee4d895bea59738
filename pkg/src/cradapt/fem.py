"""Crouzeix-Raviart and conforming P1 spaces with homogeneous Dirichlet data.

CR basis function attached to local edge ``i`` (the edge opposite local
vertex ``i``) is ``1 - 2*lambda_i``; the P1 basis function at vertex ``i`` is
``lambda_i``.  All integrals are computed in closed form.

Finite element functions are plain coefficient vectors over the free DOFs of
their space.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import TriMesh

__all__ = [
    "AssemblyError",
    "CRSpace",
    "P1Space",
    "element_stiffness_p1",
    "element_mass_p1",
    "element_stiffness_cr",
    "element_mass_cr",
    "assemble_stiffness",
    "assemble_mass",
    "p1_to_cr",
    "cr_interpolate",
    "postprocess_average",
    "solve_source",
    "broken_seminorm",
    "export_matrix",
]


class AssemblyError(ValueError):
    pass


def _bary_grads(p):
    p = np.asarray(p, float)
    area = 0.5 * ((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                  - (p[1, 1] - p[0, 1]) * (p[2, 0] - p[0, 0]))
    if area <= 0:
        raise AssemblyError(f"degenerate or clockwise triangle (area {area:.3e})")
    opp = np.array([p[2] - p[1], p[0] - p[2], p[1] - p[0]])
    return np.stack([-opp[:, 1], opp[:, 0]], axis=1) / (2 * area), area


def element_stiffness_p1(p):
    g, area = _bary_grads(p)
    return area * g @ g.T


def element_mass_p1(p):
    _, area = _bary_grads(p)
    return area / 12.0 * (np.ones((3, 3)) + np.eye(3))


def element_stiffness_cr(p):
    return 4.0 * element_stiffness_p1(p)


def element_mass_cr(p):
    _, area = _bary_grads(p)
    return area / 3.0 * np.eye(3)


def _factorize(A):
    return spla.splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A",
                     diag_pivot_thresh=0.0, options={"SymmetricMode": True})


class _Space:
    kind = ""

    def __init__(self, mesh: TriMesh):
        bad = np.flatnonzero(mesh.signed_areas <= 0)
        if bad.size:
            raise AssemblyError(f"triangle {bad[0]} is degenerate")
        self.mesh = mesh

    def _assemble(self, local):
        dofs = self.local_dofs
        T = len(dofs)
        rows = np.repeat(dofs, 3, axis=1).ravel()
        cols = np.tile(dofs, (1, 3)).ravel()
        vals = local.reshape(T, 9).ravel()
        keep = (rows >= 0) & (cols >= 0)
        A = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])),
                          shape=(self.ndof, self.ndof)).tocsr()
        A.sum_duplicates()
        return A

    def element_stiffness(self) -> np.ndarray:
        g = self.basis_gradients
        return self.mesh.signed_areas[:, None, None] * np.einsum("kid,kjd->kij", g, g)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return self._assemble(self.element_stiffness())

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return self._assemble(self.element_mass())

    @cached_property
    def factor(self):
        return _factorize(self.stiffness)

    def gradients(self, c) -> np.ndarray:
        """(T, 2) elementwise gradient of the function with coefficients ``c``."""
        loc = self.local_coefficients(c)
        return np.einsum("ki,kid->kd", loc, self.basis_gradients)

    def local_coefficients(self, c) -> np.ndarray:
        c = np.asarray(c, float)
        if c.shape != (self.ndof,):
            raise ValueError(f"{self.kind} coefficient vector has length {c.shape}, "
                             f"expected {self.ndof}")
        ext = np.concatenate([c, [0.0]])
        return ext[self.local_dofs]  # -1 picks the trailing zero


class CRSpace(_Space):
    """Crouzeix-Raviart space, one DOF per interior edge."""

    kind = "CR"

    def __init__(self, mesh: TriMesh):
        super().__init__(mesh)
        free = ~mesh.boundary_edges
        self.free_edges = np.flatnonzero(free)
        self.dof_of_edge = np.full(mesh.n_edges, -1, np.int64)
        self.dof_of_edge[self.free_edges] = np.arange(self.free_edges.size)
        self.ndof = int(self.free_edges.size)
        self.local_dofs = self.dof_of_edge[mesh.tri_edges]

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        return -2.0 * self.mesh.barycentric_gradients

    def element_mass(self) -> np.ndarray:
        return (self.mesh.signed_areas / 3.0)[:, None, None] * np.eye(3)[None]

    def vertex_traces(self, c) -> np.ndarray:
        """(T, 3) values of ``v|_K`` at the three vertices of each element."""
        loc = self.local_coefficients(c)
        return loc.sum(axis=1, keepdims=True) - 2.0 * loc


class P1Space(_Space):
    """Conforming piecewise linears, one DOF per interior vertex."""

    kind = "P1"

    def __init__(self, mesh: TriMesh):
        super().__init__(mesh)
        self.free_vertices = np.flatnonzero(~mesh.boundary_vertices)
        self.dof_of_vertex = np.full(mesh.n_vertices, -1, np.int64)
        self.dof_of_vertex[self.free_vertices] = np.arange(self.free_vertices.size)
        self.ndof = int(self.free_vertices.size)
        self.local_dofs = self.dof_of_vertex[mesh.triangles]

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        return self.mesh.barycentric_gradients

    def element_mass(self) -> np.ndarray:
        return (self.mesh.signed_areas / 12.0)[:, None, None] * (np.ones((3, 3)) + np.eye(3))[None]

    def nodal_values(self, c) -> np.ndarray:
        """Values at all mesh vertices (zero on the boundary)."""
        out = np.zeros(self.mesh.n_vertices)
        out[self.free_vertices] = c
        return out


def assemble_stiffness(space) -> sp.csr_matrix:
    return space.stiffness


def assemble_mass(space) -> sp.csr_matrix:
    return space.mass


def p1_to_cr(cr: CRSpace, p1: P1Space) -> sp.csr_matrix:
    """Exact inclusion Vc -> Vh: edge-midpoint values of a P1 function."""
    if cr.mesh is not p1.mesh:
        raise ValueError("spaces live on different meshes")
    e = cr.mesh.edges[cr.free_edges]
    rows = np.repeat(np.arange(cr.ndof), 2)
    cols = p1.dof_of_vertex[e].ravel()
    keep = cols >= 0
    return sp.csr_matrix((np.full(keep.sum(), 0.5), (rows[keep], cols[keep])),
                         shape=(cr.ndof, p1.ndof))


def cr_interpolate(space: CRSpace, w, p1: P1Space | None = None) -> np.ndarray:
    """Edge-average interpolant ``w_I`` with ``int_F w_I = int_F w``.

    ``w`` is either a callable ``w(x, y)`` (Simpson's rule along each edge,
    exact up to cubics) or P1 coefficients on ``p1``.
    """
    mesh = space.mesh
    e = mesh.edges[space.free_edges]
    if callable(w):
        a = mesh.vertices[e[:, 0]]
        b = mesh.vertices[e[:, 1]]
        m = 0.5 * (a + b)
        vals = (np.asarray(w(a[:, 0], a[:, 1]), float)
                + 4.0 * np.asarray(w(m[:, 0], m[:, 1]), float)
                + np.asarray(w(b[:, 0], b[:, 1]), float))
        return vals / 6.0
    if p1 is None:
        p1 = P1Space(mesh)
    nodal = p1.nodal_values(w)
    return 0.5 * (nodal[e[:, 0]] + nodal[e[:, 1]])


def postprocess_average(space: CRSpace, v, weights: str = "uniform",
                        p1: P1Space | None = None) -> np.ndarray:
    """Conforming P1 function obtained by averaging vertex traces of ``v``.

    ``weights`` is ``"uniform"`` (1/M over the M patch elements) or
    ``"area"``.  Boundary vertices get the value 0.
    """
    mesh = space.mesh
    if p1 is None:
        p1 = P1Space(mesh)
    traces = space.vertex_traces(v)
    if weights == "uniform":
        w = np.ones_like(traces)
    elif weights == "area":
        w = np.repeat(mesh.signed_areas[:, None], 3, axis=1)
    else:
        raise ValueError(f"unknown weight rule {weights!r}")
    idx = mesh.triangles.ravel()
    num = np.bincount(idx, weights=(w * traces).ravel(), minlength=mesh.n_vertices)
    den = np.bincount(idx, weights=w.ravel(), minlength=mesh.n_vertices)
    return num[p1.free_vertices] / den[p1.free_vertices]


def solve_source(space, f) -> np.ndarray:
    """Discrete solution operator: ``a_h(T_h f, v) = (f, v)`` for all ``v``."""
    f = np.asarray(f, float)
    return space.factor.solve(space.mass @ f)


def broken_seminorm(space, v) -> float:
    v = np.asarray(v, float)
    return float(np.sqrt(max(v @ (space.stiffness @ v), 0.0)))


def export_matrix(path, A, comment: str = "") -> None:
    """Write ``A`` in Matrix Market coordinate format (1-based triplets)."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), comment=comment, symmetry="general")
