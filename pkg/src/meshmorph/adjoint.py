"""Discrete adjoint of the squared L2 Poisson error with respect to node coordinates.

The forward problem is the eliminated system ``K_ff U_f = F_f - K_fb g(z_b)``.
With the adjoint ``K_ff lam = dE/dU_f`` (``lam = 0`` on the boundary) the total
derivative is::

    dE/dZ = dE/dZ|explicit + lam . (dF/dZ - dK/dZ U) + (dE/dU_b - (K lam)_b) grad u(z_b)

All coordinate derivatives are taken element by element for a P1 displacement
``V`` of a single vertex: ``d area = area * div V`` and ``d grad(phi) = -grad(phi) DV``.
"""
import numpy as np

from .fem import (QUAD_POINTS, QUAD_WEIGHTS, FemField, assemble_stiffness, element_geometry,
                  l2_error, quad_points, solve_poisson)
from .linalg import spd_solve
from .mesh import MeshError, check_untangled, is_tangled, mask_gradient


def _scatter(mesh, local):
    """Sum per-element-vertex 2-vectors (T, 3, 2) into nodes (N, 2)."""
    idx = mesh.tris.ravel()
    return np.column_stack([np.bincount(idx, local[..., d].ravel(), minlength=mesh.n_nodes)
                            for d in range(2)])


def reference_correction(mesh, U, u_ref):
    """Gradient of E coming from quadrature points moving through a fine reference field.

    Assembles ``2 int (u_ref - U) grad(u_ref) . V`` for every vertex direction ``V``.
    """
    if u_ref is None:
        raise ValueError("reference correction needs a reference field")
    area, _ = element_geometry(mesh.coords, mesh.tris)
    xq = quad_points(mesh.coords, mesh.tris)
    uq = np.einsum("qk,tk->tq", QUAD_POINTS, U.values[mesh.tris])
    ref, gref = u_ref.evaluate_with_gradient(xq)
    local = 2.0 * area[:, None, None] * np.einsum("q,tq,tqd,qm->tmd", QUAD_WEIGHTS, ref - uq, gref, QUAD_POINTS)
    return _scatter(mesh, local)


def adjoint_gradient(mesh, spec, reference=None, correct=True, mask=True, tol=1e-12):
    """Squared L2 error of the Poisson solution and its coordinate gradient.

    With ``reference`` (a fine-mesh FemField) the error is measured against it;
    ``correct`` adds the moving-reference term, without which the gradient is the
    one a mesh-attached reference would give.
    """
    check_untangled(mesh)
    U = solve_poisson(mesh, spec, tol=tol)
    t = mesh.tris
    area, G = element_geometry(mesh.coords, t)
    xq = quad_points(mesh.coords, t)
    Ue = U.values[t]
    uq = Ue @ QUAD_POINTS.T
    exact = spec.value(xq) if reference is None else reference.evaluate(xq)
    e = uq - exact
    Ee = area * (e ** 2 @ QUAD_WEIGHTS)
    E = float(Ee.sum())

    dEdU = np.bincount(t.ravel(), (2.0 * area[:, None] * np.einsum("q,tq,qi->ti", QUAD_WEIGHTS, e, QUAD_POINTS)).ravel(),
                       minlength=mesh.n_nodes)

    local = Ee[:, None, None] * G
    if reference is None:
        gex = spec.gradient(xq)
        local -= 2.0 * area[:, None, None] * np.einsum("q,tq,tqd,qm->tmd", QUAD_WEIGHTS, e, gex, QUAD_POINTS)

    K = assemble_stiffness(mesh)
    free = mesh.interior_nodes
    lam = np.zeros(mesh.n_nodes)
    if free.size:
        lam[free] = spd_solve(K[free][:, free], dEdU[free], tol=tol)
    le = lam[t]
    gl = np.einsum("tk,tkd->td", le, G)
    gu = np.einsum("tk,tkd->td", Ue, G)

    lq = le @ QUAD_POINTS.T
    fq = spec.source(xq)
    gfq = spec.source_gradient(xq)
    dF = area[:, None, None] * (np.einsum("q,tqd,qm,tq->tmd", QUAD_WEIGHTS, gfq, QUAD_POINTS, lq)
                                + G * (np.einsum("q,tq,tq->t", QUAD_WEIGHTS, fq, lq))[:, None, None])
    Ggu = np.einsum("tmd,td->tm", G, gu)
    Ggl = np.einsum("tmd,td->tm", G, gl)
    dK = area[:, None, None] * (G * np.sum(gl * gu, axis=1)[:, None, None]
                                - gl[:, None, :] * Ggu[:, :, None]
                                - gu[:, None, :] * Ggl[:, :, None])
    g = _scatter(mesh, local + dF - dK)

    b = mesh.boundary_nodes
    coef = dEdU[b] - (K @ lam)[b]
    g[b] += coef[:, None] * spec.gradient(mesh.coords[b])

    if reference is not None and correct:
        g += reference_correction(mesh, U, reference)
    if mask:
        g = mask_gradient(mesh, g)
    return E, g


def _dense_solve(A, b):
    """Gaussian elimination with partial pivoting, in the dtype of ``A``."""
    A = A.copy()
    b = b.copy()
    n = len(b)
    for k in range(n):
        p = k + int(np.argmax(np.abs(A[k:, k])))
        if p != k:
            A[[k, p]] = A[[p, k]]
            b[[k, p]] = b[[p, k]]
        f = A[k + 1:, k] / A[k, k]
        A[k + 1:, k:] -= f[:, None] * A[k, k:]
        b[k + 1:] -= f * b[k]
    x = np.zeros_like(b)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - A[k, k + 1:] @ x[k + 1:]) / A[k, k]
    return x


def poisson_error_extended(mesh, spec, coords=None, dtype=np.longdouble):
    """Squared L2 error of the Poisson solution, assembled and solved densely in ``dtype``.

    Used by the finite-difference oracle: a 1e-6 step in float64 leaves a
    roundoff floor of about eps * E / h on every difference quotient.
    """
    coords = (mesh.coords if coords is None else coords).astype(dtype)
    t = mesh.tris
    n = mesh.n_nodes
    area, G = element_geometry(coords, t)
    Ke = area[:, None, None] * G @ G.transpose(0, 2, 1)
    K = np.zeros((n, n), dtype=dtype)
    np.add.at(K, (np.repeat(t, 3, axis=1), np.tile(t, (1, 3))), Ke.reshape(-1, 9))
    xq = quad_points(coords, t)
    wq = QUAD_WEIGHTS.astype(dtype)
    L = QUAD_POINTS.astype(dtype)
    F = np.zeros(n, dtype=dtype)
    np.add.at(F, t, area[:, None] * np.einsum("q,tq,qi->ti", wq, spec.source(xq), L))
    free, bnd = mesh.interior_nodes, mesh.boundary_nodes
    U = np.zeros(n, dtype=dtype)
    U[bnd] = spec.value(coords[bnd])
    if free.size:
        U[free] = _dense_solve(K[np.ix_(free, free)], F[free] - K[np.ix_(free, bnd)] @ U[bnd])
    e = np.einsum("qk,tk->tq", L, U[t]) - spec.value(xq)
    return np.sum(area * (e ** 2 @ wq))


def fd_gradient_oracle(mesh, spec, h=1e-6, reference=None, extended=None, tol=1e-13):
    """Central differences of E per free coordinate: x and y for interior nodes,
    the segment tangent for edge nodes, nothing for corners.

    Exact-solution mode evaluates E in extended precision (dense, so desk-scale
    meshes only) unless ``extended=False``; fine-reference mode runs in float64.
    """
    check_untangled(mesh)
    if extended is None:
        extended = reference is None
    if extended and reference is not None:
        raise ValueError("extended precision is only available against the analytic solution")
    # perturb in the evaluation precision so the step is exact
    base = mesh.coords.astype(np.longdouble) if extended else mesh.coords

    def energy(coords):
        m = mesh.with_coords(coords)
        if is_tangled(m)[0]:
            return None
        if extended:
            return poisson_error_extended(m, spec, coords=coords)
        U = solve_poisson(m, spec, tol=tol)
        return l2_error(U, spec=spec if reference is None else None, reference=reference)

    def central(i, d, step):
        zp = base.copy()
        zp[i] += step * d
        zm = base.copy()
        zm[i] -= step * d
        ep, em = energy(zp), energy(zm)
        if ep is None or em is None:
            return None
        return float((ep - em) / (2 * base.dtype.type(step)))

    g = np.zeros(base.shape)
    eye = np.eye(2)
    for i in range(mesh.n_nodes):
        tag = mesh.tags[i]
        if tag <= -2:
            continue
        dirs = eye if tag == -1 else [mesh.tangent_dirs[i]]
        for d in dirs:
            val = central(i, d, h)
            if val is None:
                val = central(i, d, h / 10)
            if val is None:
                raise MeshError(f"finite-difference step {h:g} tangles the mesh at node {i}")
            g[i] += val * d
    return g
