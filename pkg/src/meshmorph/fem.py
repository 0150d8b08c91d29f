"""P1 finite elements for Poisson with manufactured Gaussian solutions.

Also holds the field-recovery helpers (gradient, Hessian, monitor) shared by the
deformer features and the Burgers rollout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .linalg import cg_solve, spd_solve
from .mesh import MeshError, PointLocator, check_untangled

# Dunavant degree-4 rule, barycentric points and weights normalised to sum 1
_A1, _W1 = 0.445948490915964886, 0.223381589678011466
_A2, _W2 = 0.091576213509770743, 0.109951743655321868
QUAD_POINTS = np.array([
    [1 - 2 * _A1, _A1, _A1], [_A1, 1 - 2 * _A1, _A1], [_A1, _A1, 1 - 2 * _A1],
    [1 - 2 * _A2, _A2, _A2], [_A2, 1 - 2 * _A2, _A2], [_A2, _A2, 1 - 2 * _A2],
])
QUAD_WEIGHTS = np.array([_W1, _W1, _W1, _W2, _W2, _W2])

LOCAL_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0  # times the element area


@dataclass(frozen=True)
class Gaussian:
    center: tuple
    sigma: float
    amplitude: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


@dataclass(frozen=True)
class ProblemSpec:
    """Manufactured solution u = sum_k a_k exp(-|x - c_k|^2 / (2 s_k^2)), f = -lap u, g = u."""

    gaussians: tuple = field(default_factory=tuple)

    def __post_init__(self):
        gs = tuple(g if isinstance(g, Gaussian) else Gaussian(*g) for g in self.gaussians)
        if not gs:
            raise ValueError("a problem needs at least one Gaussian")
        object.__setattr__(self, "gaussians", gs)

    @classmethod
    def single(cls, center=(0.5, 0.5), sigma=0.15, amplitude=1.0):
        return cls((Gaussian(center, sigma, amplitude),))

    @classmethod
    def zero(cls):
        return cls.single(amplitude=0.0)

    def _terms(self, x):
        x = np.asarray(x)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(float)
        for g in self.gaussians:
            d = x - np.asarray(g.center, dtype=x.dtype)
            r2 = np.sum(d * d, axis=-1)
            s2 = g.sigma ** 2
            yield d, r2, s2, g.amplitude * np.exp(-0.5 * r2 / s2)

    def value(self, x):
        return sum(e for _, _, _, e in self._terms(x))

    def gradient(self, x):
        return sum(-(e / s2)[..., None] * d for d, _, s2, e in self._terms(x))

    def hessian(self, x):
        out = 0.0
        for d, _, s2, e in self._terms(x):
            outer = d[..., :, None] * d[..., None, :] / s2 ** 2 - np.eye(2) / s2
            out = out + e[..., None, None] * outer
        return out

    def laplacian(self, x):
        return sum(e * (r2 / s2 ** 2 - 2.0 / s2) for _, r2, s2, e in self._terms(x))

    def source(self, x):
        return -self.laplacian(x)

    def source_gradient(self, x):
        # grad(lap u) = e (x - c) (4 - r^2/s^2) / s^4
        return sum(-(e * (4.0 - r2 / s2) / s2 ** 2)[..., None] * d for d, r2, s2, e in self._terms(x))

    def to_dict(self):
        return {"gaussians": [{"c": list(g.center), "sigma": g.sigma, "a": g.amplitude}
                              for g in self.gaussians]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(Gaussian(tuple(g["c"]), float(g["sigma"]), float(g["a"])) for g in d["gaussians"]))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True, eq=False)
class FemField:
    """Nodal values of a P1 function; ``values`` is (N,) for scalars or (N, 2) for vectors."""

    mesh: object
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[0] != self.mesh.n_nodes:
            raise ValueError(f"{v.shape[0]} values for {self.mesh.n_nodes} nodes")
        object.__setattr__(self, "values", v)

    @cached_property
    def _locator(self):
        return PointLocator(self.mesh)

    def evaluate(self, pts):
        pts = np.asarray(pts, dtype=float)
        tri, lam = self._locator.locate(pts.reshape(-1, 2))
        vals = np.einsum("nk,nk...->n...", lam, self.values[self.mesh.tris[tri]])
        return vals.reshape(pts.shape[:-1] + self.values.shape[1:])

    def evaluate_with_gradient(self, pts):
        """Values and element gradients at ``pts`` (scalar fields only)."""
        pts = np.asarray(pts, dtype=float)
        tri, lam = self._locator.locate(pts.reshape(-1, 2))
        _, grads = element_geometry(self.mesh.coords, self.mesh.tris[tri])
        u = self.values[self.mesh.tris[tri]]
        vals = np.sum(lam * u, axis=1)
        g = np.einsum("nk,nkd->nd", u, grads)
        return vals.reshape(pts.shape[:-1]), g.reshape(pts.shape)


# ---------------------------------------------------------------------------
# element kernels


def element_geometry(coords, tris):
    """Element areas (T,) and P1 basis gradients (T, 3, 2)."""
    p = coords[tris]
    x, y = p[..., 0], p[..., 1]
    b = np.roll(y, -1, axis=1) - np.roll(y, -2, axis=1)
    c = np.roll(x, -2, axis=1) - np.roll(x, -1, axis=1)
    det = np.sum(x * b, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):  # callers reject degenerate elements
        grads = np.stack([b, c], axis=-1) / det[:, None, None]
    return 0.5 * det, grads


def quad_points(coords, tris):
    """Physical quadrature points (T, 6, 2)."""
    return np.einsum("qk,tkd->tqd", QUAD_POINTS, coords[tris])


def local_stiffness(tri_coords):
    tri_coords = np.asarray(tri_coords, dtype=float).reshape(1, 3, 2)
    area, grads = element_geometry(tri_coords.reshape(3, 2), np.array([[0, 1, 2]]))
    if abs(area[0]) <= 1e-14:
        raise MeshError("degenerate triangle")
    return abs(area[0]) * grads[0] @ grads[0].T


def _scatter_matrix(mesh, local):
    t = mesh.tris
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_stiffness(mesh):
    area, G = element_geometry(mesh.coords, mesh.tris)
    return _scatter_matrix(mesh, area[:, None, None] * G @ G.transpose(0, 2, 1))


def assemble_mass(mesh):
    area, _ = element_geometry(mesh.coords, mesh.tris)
    return _scatter_matrix(mesh, area[:, None, None] * LOCAL_MASS)


def assemble_load(mesh, func):
    """Load vector of int(func * phi_i) with the degree-4 rule."""
    area, _ = element_geometry(mesh.coords, mesh.tris)
    fq = func(quad_points(mesh.coords, mesh.tris))
    local = area[:, None] * np.einsum("q,tq,qi->ti", QUAD_WEIGHTS, fq, QUAD_POINTS)
    return np.bincount(mesh.tris.ravel(), local.ravel(), minlength=mesh.n_nodes)


def dirichlet_eliminate(K, F, nodes, values):
    """Symmetric elimination: rows/columns of ``nodes`` become identity, RHS carries the data."""
    n = K.shape[0]
    g = np.zeros(n)
    g[nodes] = values
    fixed = np.zeros(n, dtype=bool)
    fixed[nodes] = True
    D = sp.diags((~fixed).astype(float))
    K2 = (D @ K @ D + sp.diags(fixed.astype(float))).tocsr()
    F2 = F - K @ g
    F2[fixed] = g[fixed]
    return K2, F2


def assemble_poisson(mesh, spec):
    check_untangled(mesh)
    K = assemble_stiffness(mesh)
    F = assemble_load(mesh, spec.source)
    b = mesh.boundary_nodes
    return dirichlet_eliminate(K, F, b, spec.value(mesh.coords[b]))


def solve_poisson(mesh, spec, tol=1e-12):
    K, F = assemble_poisson(mesh, spec)
    free = mesh.interior_nodes
    U = F.copy()  # boundary rows of F already hold g
    if free.size:
        U[free] = spd_solve(K[free][:, free], F[free], tol=tol)
    return FemField(mesh, U)


def l2_error(field, spec=None, reference=None):
    """Squared L2 error against the analytic solution of ``spec`` or a fine ``reference`` FemField."""
    mesh = field.mesh
    check_untangled(mesh)
    if (spec is None) == (reference is None):
        raise ValueError("pass exactly one of spec or reference")
    area, _ = element_geometry(mesh.coords, mesh.tris)
    xq = quad_points(mesh.coords, mesh.tris)
    uq = np.einsum("qk,tk->tq", QUAD_POINTS, field.values[mesh.tris])
    exact = spec.value(xq) if reference is None else reference.evaluate(xq)
    return float(np.sum(area * ((uq - exact) ** 2 @ QUAD_WEIGHTS)))


def error_reduction(E0, E):
    """Percent reduction of the (non-squared) L2 error, from squared errors ``E0`` and ``E``."""
    e0 = np.sqrt(E0)
    if e0 == 0.0:
        raise ValueError("baseline error is zero; error reduction is undefined")
    return 100.0 * (e0 - np.sqrt(E)) / e0


def vector_l2_error(values, mesh, reference):
    """Squared L2 error of a P1 vector field against a reference vector FemField."""
    area, _ = element_geometry(mesh.coords, mesh.tris)
    xq = quad_points(mesh.coords, mesh.tris)
    uq = np.einsum("qk,tkc->tqc", QUAD_POINTS, values[mesh.tris])
    d2 = np.sum((uq - reference.evaluate(xq)) ** 2, axis=-1)
    return float(np.sum(area * (d2 @ QUAD_WEIGHTS)))


# ---------------------------------------------------------------------------
# recovery


def element_gradients(field):
    _, G = element_geometry(field.mesh.coords, field.mesh.tris)
    return np.einsum("tk,tkd->td", field.values[field.mesh.tris], G)


def recover_gradient(field):
    """Nodal gradient by area-weighted averaging of element gradients."""
    mesh = field.mesh
    area, _ = element_geometry(mesh.coords, mesh.tris)
    ge = element_gradients(field) * area[:, None]
    idx = mesh.tris.ravel()
    w = np.bincount(idx, np.repeat(area, 3), minlength=mesh.n_nodes)
    g = np.column_stack([np.bincount(idx, np.repeat(ge[:, d], 3), minlength=mesh.n_nodes)
                         for d in range(2)])
    return g / w[:, None]


def recover_monitor(field, guard=1e-12):
    """m = 1 + 5 |grad U| / max |grad U|, or m = 1 when the gradient vanishes."""
    gn = np.linalg.norm(recover_gradient(field), axis=1)
    gmax = gn.max()
    if gmax < guard:
        return FemField(field.mesh, np.ones(field.mesh.n_nodes))
    return FemField(field.mesh, 1.0 + 5.0 * gn / gmax)


def recover_hessian(field):
    """Weak Hessian with H = 0 on the boundary, consistent mass solve.

    Returns the per-node (N, 2, 2) array and a FemField of its Frobenius norm.
    """
    mesh = field.mesh
    area, G = element_geometry(mesh.coords, mesh.tris)
    gu = np.einsum("tk,tkd->td", field.values[mesh.tris], G)
    # rhs_ij[k] = -int d_i u d_j phi_k
    local = -area[:, None, None, None] * gu[:, :, None, None] * G.transpose(0, 2, 1)[:, None, :, :]
    idx = mesh.tris.ravel()
    rhs = np.empty((mesh.n_nodes, 2, 2))
    for i in range(2):
        for j in range(2):
            rhs[:, i, j] = np.bincount(idx, local[:, i, j, :].ravel(), minlength=mesh.n_nodes)
    rhs[:, 0, 1] = rhs[:, 1, 0] = 0.5 * (rhs[:, 0, 1] + rhs[:, 1, 0])
    H = np.zeros((mesh.n_nodes, 2, 2))
    free = mesh.interior_nodes
    if free.size:
        M = assemble_mass(mesh)[free][:, free]
        for i, j in ((0, 0), (0, 1), (1, 1)):
            H[free, i, j] = cg_solve(M, rhs[free, i, j], tol=1e-12)
        H[:, 1, 0] = H[:, 0, 1]
    norm = np.sqrt(np.sum(H * H, axis=(1, 2)))
    return H, FemField(mesh, norm)


# ---------------------------------------------------------------------------
# field files


def field_to_dict(values, name="u"):
    v = np.asarray(getattr(values, "values", values), dtype=float)
    return {"name": name, "values": v.tolist()}


def write_field(values, path, name="u"):
    with open(path, "w") as f:
        json.dump(field_to_dict(values, name), f)


def read_field(path):
    """Returns ``(name, values)``."""
    with open(path) as f:
        d = json.load(f)
    if "values" not in d:
        raise ValueError(f"{path}: field file needs 'values'")
    return d.get("name", "u"), np.asarray(d["values"], dtype=float)
