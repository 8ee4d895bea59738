"""Conforming triangular meshes with newest-vertex bisection.

Triangles are stored counterclockwise with the convention that the local
edge opposite local vertex 0 is the refinement edge; vertex 0 is therefore
the "newest vertex" of the triangle.  Local edge ``i`` is always the edge
opposite local vertex ``i``.

Example
-------
>>> m = make_unit_square(2)
>>> m.n_triangles, m.n_vertices, m.n_edges
(8, 9, 16)
>>> fine = refine(m, {0})
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "TriMesh",
    "make_unit_square",
    "make_square_ring",
    "refine",
    "uniform_refine",
    "diameter",
    "vertex_patch",
    "check_invariants",
    "load_mesh",
    "save_mesh",
    "MeshError",
]

_NVB_HEADER = "# vertex order: newest vertex first"


class MeshError(ValueError):
    """Raised for invalid mesh input (degenerate or malformed triangles)."""


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable conforming triangulation of a polygonal domain.

    Parameters
    ----------
    vertices : (N, 2) array
    triangles : (T, 3) int array, counterclockwise, refinement edge opposite
        local vertex 0.
    generation : (T,) int array, number of bisections since the initial mesh.
    parent : (T,) int array, index of the triangle in the *previous* mesh this
        triangle descends from (``-1`` for an initial mesh).
    vertex_parents : (N, 2) int array, for vertices created by the last
        refinement the endpoints of the bisected edge, ``-1`` otherwise.
    domain_tag : free-form label.
    holes : number of holes, used by the Euler relation.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    generation: np.ndarray = None
    parent: np.ndarray = None
    vertex_parents: np.ndarray = None
    domain_tag: str = ""
    holes: int = 0
    _meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        v = _frozen(self.vertices, float)
        t = _frozen(self.triangles, np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise MeshError("vertices must have shape (N, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangles must have shape (T, 3)")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates must be finite")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle references a missing vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        nt = len(t)
        gen = np.zeros(nt, np.int64) if self.generation is None else self.generation
        par = np.full(nt, -1, np.int64) if self.parent is None else self.parent
        vp = (np.full((len(v), 2), -1, np.int64) if self.vertex_parents is None
              else self.vertex_parents)
        object.__setattr__(self, "generation", _frozen(gen, np.int64))
        object.__setattr__(self, "parent", _frozen(par, np.int64))
        object.__setattr__(self, "vertex_parents", _frozen(vp, np.int64))
        bad = np.flatnonzero(self.signed_areas <= 0)
        if bad.size:
            raise MeshError(f"triangle {bad[0]} has non-positive signed area "
                            f"{self.signed_areas[bad[0]]:.3e}")

    # -- sizes -------------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    # -- geometry ----------------------------------------------------------

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        """Longest side of every triangle (h_K)."""
        return self.edge_lengths[self.tri_edges].max(axis=1)

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """(T, 3, 2) gradients of the barycentric coordinates."""
        p = self.vertices[self.triangles]
        # grad lambda_i is the rotated opposite edge over twice the area
        opp = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        rot = np.stack([-opp[..., 1], opp[..., 0]], axis=-1)
        return rot / (2.0 * self.signed_areas)[:, None, None]

    def angles(self) -> np.ndarray:
        """(T, 3) interior angles, angle ``i`` at local vertex ``i``."""
        p = self.vertices[self.triangles]
        out = np.empty((self.n_triangles, 3))
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cos = (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            out[:, i] = np.arccos(np.clip(cos, -1.0, 1.0))
        return out

    def min_angle(self) -> float:
        return float(self.angles().min())

    @property
    def area(self) -> float:
        return float(self.signed_areas.sum())

    # -- topology ----------------------------------------------------------

    @cached_property
    def _edge_data(self):
        t = self.triangles
        # local edge i joins the two vertices other than i
        local = t[:, [[1, 2], [2, 0], [0, 1]]].reshape(-1, 2)
        lo = local.min(axis=1)
        hi = local.max(axis=1)
        key = lo * self.n_vertices + hi
        uniq, first, inv = np.unique(key, return_index=True, return_inverse=True)
        edges = np.stack([lo[first], hi[first]], axis=1)
        tri_edges = inv.reshape(-1, 3)
        counts = np.bincount(inv, minlength=len(uniq))
        if counts.max(initial=0) > 2:
            e = int(np.argmax(counts))
            raise MeshError(f"edge {tuple(edges[e])} shared by {counts[e]} triangles")
        et = np.full((len(uniq), 2), -1, np.int64)
        tri_ids = np.repeat(np.arange(self.n_triangles), 3)
        order = np.argsort(inv, kind="stable")
        sorted_inv = inv[order]
        starts = np.searchsorted(sorted_inv, np.arange(len(uniq)))
        et[:, 0] = tri_ids[order[starts]]
        two = counts == 2
        et[two, 1] = tri_ids[order[starts[two] + 1]]
        return _frozen(edges, np.int64), _frozen(tri_edges, np.int64), _frozen(et, np.int64), uniq

    @property
    def edges(self) -> np.ndarray:
        """(E, 2) vertex pairs, sorted within each row."""
        return self._edge_data[0]

    @property
    def tri_edges(self) -> np.ndarray:
        """(T, 3) edge ids; column ``i`` is the edge opposite local vertex ``i``."""
        return self._edge_data[1]

    @property
    def edge_triangles(self) -> np.ndarray:
        """(E, 2) incident triangles, second entry ``-1`` on the boundary."""
        return self._edge_data[2]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return _frozen(self.edge_triangles[:, 1] < 0, bool)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return _frozen(mask, bool)

    @cached_property
    def _patches(self):
        t = self.triangles.ravel()
        order = np.argsort(t, kind="stable")
        ptr = np.concatenate([[0], np.cumsum(np.bincount(t, minlength=self.n_vertices))])
        return ptr, order // 3

    def vertex_patch(self, v: int) -> np.ndarray:
        """Triangles containing vertex ``v``, ascending."""
        ptr, tris = self._patches
        return tris[ptr[v]:ptr[v + 1]]

    def edge_midpoints(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (self.vertices[e[:, 0]] + self.vertices[e[:, 1]])

    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_triangles


def diameter(mesh: TriMesh, k: int) -> float:
    """Longest side of triangle ``k``."""
    return float(mesh.diameters[k])


def vertex_patch(mesh: TriMesh, v: int) -> set[int]:
    return set(int(k) for k in mesh.vertex_patch(v))


# -- construction ------------------------------------------------------------

def _orient_longest_first(vertices, triangles):
    """Rotate each ccw triangle so that its longest edge is opposite vertex 0."""
    p = vertices[triangles]
    lens = np.stack([np.linalg.norm(p[:, (i + 2) % 3] - p[:, (i + 1) % 3], axis=1)
                     for i in range(3)], axis=1)
    # ties are broken towards the lowest local index
    first = np.argmax(lens - 1e-12 * np.arange(3), axis=1)
    idx = (first[:, None] + np.arange(3)) % 3
    return np.take_along_axis(triangles, idx, axis=1)


def _ccw(vertices, triangles):
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    cw = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) < 0
    out = triangles.copy()
    out[cw] = out[cw][:, [0, 2, 1]]
    return out


def make_unit_square(n: int) -> TriMesh:
    """Structured mesh of (0,1)^2 with ``2 n^2`` triangles.

    Every cell is cut along its anti-diagonal so that the corner (0,0) sits
    in a single triangle.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(x, x, indexing="xy")
    vertices = np.stack([xx.ravel(), yy.ravel()], axis=1)

    def vid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((a, b, d))
            tris.append((b, c, d))
    t = _orient_longest_first(vertices, np.array(tris, np.int64))
    return TriMesh(vertices, t, domain_tag=f"unit_square({n})", holes=0)


def make_square_ring() -> TriMesh:
    """Coarse mesh of (0,1)^2 minus [1/3,2/3]^2.

    Each of the eight cells of side 1/3 is split into four triangles through
    its centre, so the mesh has the full symmetry group of the square.
    """
    g = np.arange(4) / 3.0
    verts = [(g[i], g[j]) for j in range(4) for i in range(4)]
    tris = []
    for j in range(3):
        for i in range(3):
            if i == 1 and j == 1:
                continue
            c = len(verts)
            verts.append(((i + 0.5) / 3.0, (j + 0.5) / 3.0))
            corners = [j * 4 + i, j * 4 + i + 1, (j + 1) * 4 + i + 1, (j + 1) * 4 + i]
            for a in range(4):
                tris.append((c, corners[a], corners[(a + 1) % 4]))
    vertices = np.array(verts)
    t = _orient_longest_first(vertices, _ccw(vertices, np.array(tris, np.int64)))
    return TriMesh(vertices, t, domain_tag="square_ring", holes=1)


# -- refinement ---------------------------------------------------------------

def refine(mesh: TriMesh, marked) -> TriMesh:
    """Newest-vertex bisection of the marked triangles plus conforming closure.

    Every marked triangle is bisected at least once; neighbours are bisected
    as needed so that the result has no hanging nodes.
    """
    marked = np.unique(np.fromiter((int(k) for k in marked), dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked[0] < 0 or marked[-1] >= mesh.n_triangles:
        raise IndexError("marked triangle id out of range")

    t2e = mesh.tri_edges
    flag = np.zeros(mesh.n_edges, bool)
    flag[t2e[marked, 0]] = True
    while True:
        need = flag[t2e].any(axis=1) & ~flag[t2e[:, 0]]
        if not need.any():
            break
        flag[t2e[need, 0]] = True

    split_edges = np.flatnonzero(flag)
    nv = mesh.n_vertices
    nv_new = nv + split_edges.size
    ends = mesh.edges[split_edges]
    vertices = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[ends[:, 0]]
                                                      + mesh.vertices[ends[:, 1]])])
    vparents = np.full((nv_new, 2), -1, np.int64)
    vparents[nv:] = ends
    mid_keys = ends[:, 0] * nv_new + ends[:, 1]
    order = np.argsort(mid_keys)
    mid_keys = mid_keys[order]
    mid_ids = (nv + np.arange(split_edges.size))[order]

    tris = mesh.triangles.copy()
    gen = mesh.generation.copy()
    parent = np.arange(mesh.n_triangles)
    # at most three rounds: refinement edge, then each child's refinement edge
    for _ in range(3):
        a, b = tris[:, 1], tris[:, 2]
        key = np.minimum(a, b) * nv_new + np.maximum(a, b)
        pos = np.clip(np.searchsorted(mid_keys, key), 0, len(mid_keys) - 1)
        hit = mid_keys[pos] == key
        if not hit.any():
            break
        m = mid_ids[pos]
        reps = np.where(hit, 2, 1)
        src = np.repeat(np.arange(len(tris)), reps)
        first = np.concatenate([[True], src[1:] != src[:-1]])
        out = tris[src].copy()
        p0, p1, p2 = tris[src, 0], tris[src, 1], tris[src, 2]
        mm = m[src]
        h = hit[src]
        ca = h & first
        cb = h & ~first
        out[ca] = np.stack([mm[ca], p0[ca], p1[ca]], axis=1)
        out[cb] = np.stack([mm[cb], p2[cb], p0[cb]], axis=1)
        tris = out
        gen = gen[src] + h
        parent = parent[src]

    return TriMesh(vertices, tris, generation=gen, parent=parent,
                   vertex_parents=vparents, domain_tag=mesh.domain_tag,
                   holes=mesh.holes)


def uniform_refine(mesh: TriMesh, sweeps: int = 2) -> TriMesh:
    """Bisect every triangle ``sweeps`` times (two sweeps halve h)."""
    out = mesh
    for _ in range(sweeps):
        out = refine(out, range(out.n_triangles))
    return out


def check_invariants(mesh: TriMesh, area: float | None = None,
                     perimeter: float | None = None) -> list[str]:
    """Return a list of violated mesh invariants (empty when all hold)."""
    problems = []
    if np.any(mesh.signed_areas <= 0):
        problems.append("non-positive triangle area")
    if np.any(np.sort(mesh.triangles, axis=1)[:, 1:] == np.sort(mesh.triangles, axis=1)[:, :-1]):
        problems.append("repeated vertex in triangle")
    counts = (mesh.edge_triangles >= 0).sum(axis=1)
    if np.any((counts < 1) | (counts > 2)):
        problems.append("edge with invalid incidence")
    chi = mesh.euler_characteristic()
    if chi != 1 - mesh.holes:
        problems.append(f"Euler characteristic {chi} != {1 - mesh.holes}")
    used = np.zeros(mesh.n_vertices, bool)
    used[mesh.triangles.ravel()] = True
    if not used.all():
        problems.append("unused vertex")
    if area is not None and abs(mesh.area - area) > 1e-12 * max(1.0, abs(area)):
        problems.append(f"area {mesh.area!r} != {area!r}")
    blen = float(mesh.edge_lengths[mesh.boundary_edges].sum())
    if perimeter is not None and abs(blen - perimeter) > 1e-10 * perimeter:
        # a hanging node turns an interior edge into a fake boundary edge
        problems.append(f"boundary length {blen!r} != {perimeter!r} (hanging node?)")
    return problems


# -- file I/O -----------------------------------------------------------------

def save_mesh(mesh: TriMesh, path) -> None:
    """Write the line-oriented ``v x y`` / ``t i j k`` format."""
    lines = [f"# {mesh.domain_tag}" if mesh.domain_tag else "# mesh", _NVB_HEADER,
             f"# holes {mesh.holes}"]
    lines += [f"v {x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"t {i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mesh(path, holes: int | None = None) -> TriMesh:
    """Read a mesh file; clockwise triangles are reoriented.

    Files written by :func:`save_mesh` keep their vertex order (and hence
    their refinement edges); other files get the longest edge of each
    triangle as refinement edge.
    """
    verts, tris = [], []
    keep_order = False
    file_holes = None
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line == _NVB_HEADER:
            keep_order = True
            continue
        if line.startswith("# holes"):
            file_holes = int(line.split()[2])
            continue
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "v" and len(parts) == 3:
                verts.append((float(parts[1]), float(parts[2])))
            elif parts[0] == "t" and len(parts) == 4:
                tris.append(tuple(int(p) for p in parts[1:]))
            else:
                raise ValueError
        except ValueError:
            raise MeshError(f"{path}:{lineno}: cannot parse {raw!r}") from None
    if not verts or not tris:
        raise MeshError(f"{path}: no vertices or triangles")
    v = np.array(verts, float)
    t = np.array(tris, np.int64)
    if t.min() < 0 or t.max() >= len(v):
        raise MeshError(f"{path}: triangle references a missing vertex")
    p = v[t]
    sa = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    if np.any(sa == 0):
        raise MeshError(f"{path}: degenerate triangle {int(np.flatnonzero(sa == 0)[0])}")
    t = _ccw(v, t)
    if not keep_order:
        t = _orient_longest_first(v, t)
    if holes is None:
        holes = file_holes
    if holes is None:
        # V - E + T = 1 - holes for a connected planar triangulation
        probe = TriMesh(v, t)
        holes = 1 - probe.euler_characteristic()
    return TriMesh(v, t, domain_tag=Path(path).stem, holes=holes)


def perimeter(mesh: TriMesh) -> float:
    return float(mesh.edge_lengths[mesh.boundary_edges].sum())


def min_angle_degrees(mesh: TriMesh) -> float:
    return math.degrees(mesh.min_angle())
