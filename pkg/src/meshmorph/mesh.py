"""Triangle meshes: geometry, quality, graph extraction, point location and JSON I/O.

Nodes carry a boundary tag: ``INTERIOR`` (-1), a segment id ``k >= 0`` for nodes
sliding on segment ``k`` of the domain polygon (segment ``k`` runs from vertex
``k`` to vertex ``k+1``), or ``corner_tag(v)`` for nodes pinned at polygon
vertex ``v``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

INTERIOR = -1
DEGENERATE_TOL = 1e-14
BOUNDARY_TOL = 1e-12
MESH_FORMAT_VERSION = 1


class MeshError(ValueError):
    pass


class TangledMeshError(MeshError):
    def __init__(self, message, triangles=()):
        super().__init__(message)
        self.triangles = list(triangles)


def corner_tag(v):
    return -2 - v


def _tag_to_str(tag):
    if tag == INTERIOR:
        return "interior"
    if tag >= 0:
        return f"edge:{tag}"
    return f"corner:{-2 - tag}"


def _tag_from_str(s):
    if s == "interior":
        return INTERIOR
    kind, _, idx = s.partition(":")
    if kind == "edge":
        return int(idx)
    if kind == "corner":
        return corner_tag(int(idx))
    raise MeshError(f"unknown boundary tag {s!r}")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    coords: np.ndarray
    tris: np.ndarray
    tags: np.ndarray
    domain: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords", _frozen(self.coords, float).reshape(-1, 2))
        object.__setattr__(self, "tris", _frozen(self.tris, np.int64).reshape(-1, 3))
        object.__setattr__(self, "tags", _frozen(self.tags, np.int64))
        object.__setattr__(self, "domain", _frozen(self.domain, float).reshape(-1, 2))
        n = len(self.coords)
        if len(self.tags) != n:
            raise MeshError(f"{len(self.tags)} boundary tags for {n} nodes")
        if self.tris.size and (self.tris.min() < 0 or self.tris.max() >= n):
            raise MeshError("triangle index out of range")
        t = self.tris
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise MeshError("repeated node index within a triangle")

    @property
    def n_nodes(self):
        return len(self.coords)

    @property
    def n_tris(self):
        return len(self.tris)

    def with_coords(self, coords):
        """Same topology, new node positions (no validation of tangling)."""
        m = Mesh(coords, self.tris, self.tags, self.domain)
        # topology-only caches carry over
        for key in ("graph", "_tri_neighbors", "tangent_dirs"):
            if key in self.__dict__:
                m.__dict__[key] = self.__dict__[key]
        return m

    @cached_property
    def boundary_nodes(self):
        return np.flatnonzero(self.tags != INTERIOR)

    @cached_property
    def interior_nodes(self):
        return np.flatnonzero(self.tags == INTERIOR)

    @cached_property
    def tangent_dirs(self):
        """Unit tangent of the owning segment for edge nodes, zero elsewhere."""
        t = np.zeros((self.n_nodes, 2))
        edge = self.tags >= 0
        if edge.any():
            seg = self.tags[edge]
            p0 = self.domain[seg]
            p1 = self.domain[(seg + 1) % len(self.domain)]
            d = p1 - p0
            t[edge] = d / np.linalg.norm(d, axis=1)[:, None]
        return t

    @cached_property
    def graph(self):
        return mesh_graph(self)

    @cached_property
    def _tri_neighbors(self):
        """nbr[t, k]: triangle across the edge opposite local vertex k, -1 on the boundary."""
        t = self.tris
        nt = len(t)
        edges = np.concatenate([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]])
        owner = np.tile(np.arange(nt), 3)
        local = np.repeat(np.arange(3), nt)
        key = np.sort(edges, axis=1)
        order = np.lexsort((key[:, 1], key[:, 0]))
        key, owner, local = key[order], owner[order], local[order]
        nbr = -np.ones((nt, 3), dtype=np.int64)
        same = np.all(key[1:] == key[:-1], axis=1)
        i = np.flatnonzero(same)
        nbr[owner[i], local[i]] = owner[i + 1]
        nbr[owner[i + 1], local[i + 1]] = owner[i]
        return nbr


@dataclass(frozen=True, eq=False)
class MeshGraph:
    """Directed neighbour lists in CSR layout: neighbours of i are indices[indptr[i]:indptr[i+1]]."""

    indptr: np.ndarray
    indices: np.ndarray

    @property
    def n_nodes(self):
        return len(self.indptr) - 1

    @property
    def n_edges(self):
        return len(self.indices)

    @cached_property
    def src(self):
        return np.repeat(np.arange(self.n_nodes), np.diff(self.indptr))

    @property
    def dst(self):
        return self.indices

    def neighbors(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def degree(self):
        return np.diff(self.indptr)


def build_rect_mesh(nx, ny, domain=(0.0, 1.0, 0.0, 1.0)):
    """Structured triangulation of the rectangle ``(x0, x1, y0, y1)``.

    Every cell is split along its (lower-left, upper-right) diagonal.
    """
    if nx < 2 or ny < 2:
        raise MeshError(f"need at least 2 nodes per side, got {nx}x{ny}")
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise MeshError("empty rectangle")
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys)
    coords = np.column_stack([X.ravel(), Y.ravel()])

    I, J = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    I, J = I.ravel(), J.ravel()
    n00 = I + nx * J
    n10 = n00 + 1
    n01 = n00 + nx
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    tris = np.empty((2 * len(n00), 3), dtype=np.int64)
    tris[0::2] = lower
    tris[1::2] = upper

    i, j = np.arange(nx * ny) % nx, np.arange(nx * ny) // nx
    tags = np.full(nx * ny, INTERIOR)
    tags[j == 0] = 0
    tags[i == nx - 1] = 1
    tags[j == ny - 1] = 2
    tags[i == 0] = 3
    tags[(i == 0) & (j == 0)] = corner_tag(0)
    tags[(i == nx - 1) & (j == 0)] = corner_tag(1)
    tags[(i == nx - 1) & (j == ny - 1)] = corner_tag(2)
    tags[(i == 0) & (j == ny - 1)] = corner_tag(3)
    poly = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    return Mesh(coords, tris, tags, poly)


def triangle_areas(coords, tris):
    p = coords[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def signed_areas(mesh):
    return triangle_areas(mesh.coords, mesh.tris)


def signed_area(mesh, t):
    if not 0 <= t < mesh.n_tris:
        raise IndexError(f"triangle {t} out of range")
    return float(triangle_areas(mesh.coords, mesh.tris[t:t + 1])[0])


def is_tangled(mesh):
    """Return ``(tangled, offending_triangles)``; areas at or below 1e-14 count as tangled."""
    bad = np.flatnonzero(signed_areas(mesh) <= DEGENERATE_TOL)
    return bool(bad.size), bad.tolist()


def check_untangled(mesh):
    tangled, bad = is_tangled(mesh)
    if tangled:
        raise TangledMeshError(f"mesh is tangled: {len(bad)} inverted or degenerate triangles "
                               f"(first: {bad[:5]})", bad)


def polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def aspect_ratio(mesh):
    """Per-element longest edge over the altitude onto it; returns ``(values, mean, max)``."""
    p = mesh.coords[mesh.tris]
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    lmax2 = np.max(np.sum(e * e, axis=2), axis=1)
    area = np.abs(signed_areas(mesh))
    bad = np.flatnonzero(area <= DEGENERATE_TOL)
    if bad.size:
        raise MeshError(f"degenerate element {bad[0]} has no aspect ratio")
    ar = lmax2 / (2.0 * area)
    return ar, float(ar.mean()), float(ar.max())


def mesh_graph(mesh):
    t = mesh.tris
    a = np.concatenate([t[:, 0], t[:, 1], t[:, 2], t[:, 1], t[:, 2], t[:, 0]])
    b = np.concatenate([t[:, 1], t[:, 2], t[:, 0], t[:, 0], t[:, 1], t[:, 2]])
    pairs = np.unique(np.column_stack([a, b]), axis=0)  # sorted by (src, dst)
    indptr = np.zeros(mesh.n_nodes + 1, dtype=np.int64)
    np.add.at(indptr, pairs[:, 0] + 1, 1)
    return MeshGraph(np.cumsum(indptr), pairs[:, 1].copy())


def check_boundary(mesh, tol=BOUNDARY_TOL):
    """Raise if an edge/corner node is off its segment/vertex by more than ``tol``."""
    nv = len(mesh.domain)
    for i in mesh.boundary_nodes:
        tag = mesh.tags[i]
        z = mesh.coords[i]
        if tag >= 0:
            if tag >= nv:
                raise MeshError(f"node {i}: segment {tag} does not exist")
            p0, p1 = mesh.domain[tag], mesh.domain[(tag + 1) % nv]
            d = p1 - p0
            s = np.clip(np.dot(z - p0, d) / np.dot(d, d), 0.0, 1.0)
            dist = np.linalg.norm(z - (p0 + s * d))
        else:
            v = -2 - tag
            if v >= nv:
                raise MeshError(f"node {i}: polygon vertex {v} does not exist")
            dist = np.linalg.norm(z - mesh.domain[v])
        if dist > tol:
            raise MeshError(f"boundary node {i} lies {dist:.3g} off the domain boundary")


def boundary_distance(mesh):
    """Max distance of tagged boundary nodes to their segment / vertex."""
    nv = len(mesh.domain)
    worst = 0.0
    edge = np.flatnonzero(mesh.tags >= 0)
    if edge.size:
        seg = mesh.tags[edge]
        p0 = mesh.domain[seg]
        d = mesh.domain[(seg + 1) % nv] - p0
        z = mesh.coords[edge] - p0
        s = np.clip(np.sum(z * d, axis=1) / np.sum(d * d, axis=1), 0.0, 1.0)
        worst = max(worst, float(np.max(np.linalg.norm(z - s[:, None] * d, axis=1))))
    cor = np.flatnonzero(mesh.tags <= -2)
    if cor.size:
        v = -2 - mesh.tags[cor]
        worst = max(worst, float(np.max(np.linalg.norm(mesh.coords[cor] - mesh.domain[v], axis=1))))
    return worst


def mask_gradient(mesh, g):
    """Zero corner components and the normal component at edge nodes."""
    g = np.array(g, dtype=float).reshape(-1, 2)
    t = mesh.tangent_dirs
    edge = mesh.tags >= 0
    g[edge] = np.sum(g[edge] * t[edge], axis=1)[:, None] * t[edge]
    g[mesh.tags <= -2] = 0.0
    return g


# ---------------------------------------------------------------------------
# point location


def _barycentric(p, x):
    """p: (..., 3, 2) triangles, x: (..., 2) points -> (..., 3) barycentric coords."""
    a, b, c = p[..., 0, :], p[..., 1, :], p[..., 2, :]
    v0, v1, v2 = b - a, c - a, x - a
    det = v0[..., 0] * v1[..., 1] - v0[..., 1] * v1[..., 0]
    l1 = (v2[..., 0] * v1[..., 1] - v2[..., 1] * v1[..., 0]) / det
    l2 = (v0[..., 0] * v2[..., 1] - v0[..., 1] * v2[..., 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


class PointLocator:
    """Locate points in a mesh by walking from the nearest centroid, brute force as fallback."""

    def __init__(self, mesh, tol=1e-10):
        self.mesh = mesh
        self.tol = tol
        self._p = mesh.coords[mesh.tris]
        self._tree = cKDTree(self._p.mean(axis=1))
        self._nbr = mesh._tri_neighbors

    def locate(self, pts, max_walk=None):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        n = len(pts)
        tri = self._tree.query(pts)[1].astype(np.int64)
        lam = np.zeros((n, 3))
        done = np.zeros(n, dtype=bool)
        active = np.arange(n)
        steps = max_walk if max_walk is not None else 4 * int(np.sqrt(self.mesh.n_tris)) + 10
        for _ in range(steps):
            if active.size == 0:
                break
            l = _barycentric(self._p[tri[active]], pts[active])
            inside = l.min(axis=1) >= -self.tol
            lam[active[inside]] = l[inside]
            done[active[inside]] = True
            out = active[~inside]
            nxt = self._nbr[tri[out], np.argmin(l[~inside], axis=1)]
            tri[out] = nxt
            active = out[nxt >= 0]
        for i in np.flatnonzero(~done):
            l = _barycentric(self._p, np.broadcast_to(pts[i], (self.mesh.n_tris, 2)))
            k = int(np.argmax(l.min(axis=1)))
            if l[k].min() < -self.tol:
                raise MeshError(f"point {pts[i].tolist()} lies outside the mesh")
            tri[i] = k
            lam[i] = l[k]
        return tri, lam


def locate_points(mesh, pts):
    return PointLocator(mesh).locate(pts)


# ---------------------------------------------------------------------------
# JSON I/O


def mesh_to_dict(mesh):
    return {
        "version": MESH_FORMAT_VERSION,
        "coords": mesh.coords.tolist(),
        "tris": mesh.tris.tolist(),
        "boundary": [_tag_to_str(int(t)) for t in mesh.tags],
        "domain": mesh.domain.tolist(),
    }


def mesh_from_dict(d):
    for key in ("version", "coords", "tris", "boundary", "domain"):
        if key not in d:
            raise MeshError(f"mesh file missing {key!r}")
    if d["version"] != MESH_FORMAT_VERSION:
        raise MeshError(f"unsupported mesh format version {d['version']}")
    coords = np.asarray(d["coords"], dtype=float)
    tris = np.asarray(d["tris"], dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise MeshError("coords must be a list of [x, y] pairs")
    if tris.size and (tris.ndim != 2 or tris.shape[1] != 3):
        raise MeshError("tris must be a list of [i, j, k] triples")
    mesh = Mesh(coords, tris, [_tag_from_str(s) for s in d["boundary"]], d["domain"])
    tangled, bad = is_tangled(mesh)
    if tangled:
        warnings.warn(f"mesh read with {len(bad)} tangled triangles; solvers will refuse it")
    return mesh


def write_mesh(mesh, path):
    # repr-exact floats keep the round trip bitwise
    Path(path).write_text(json.dumps(mesh_to_dict(mesh)))


def read_mesh(path):
    return mesh_from_dict(json.loads(Path(path).read_text()))


def mesh_io(path, mode, mesh=None):
    """``mode='read'`` returns the mesh at ``path``; ``mode='write'`` stores ``mesh`` there."""
    if mode == "read":
        return read_mesh(path)
    if mode == "write":
        if not isinstance(mesh, Mesh):
            raise MeshError("write mode needs a Mesh")
        write_mesh(mesh, path)
        return mesh
    raise ValueError(f"mode must be 'read' or 'write', got {mode!r}")
