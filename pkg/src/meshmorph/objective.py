"""Equidistribution regularizer and the combined mesh loss."""
from dataclasses import dataclass

import numpy as np

from .adjoint import _scatter, adjoint_gradient
from .fem import element_geometry
from .mesh import check_untangled, mask_gradient


@dataclass(frozen=True)
class LossBreakdown:
    E: float
    L_equi: float
    w_equi: float
    total: float


def _monitor_values(mesh, monitor):
    m = getattr(monitor, "values", monitor)
    m = np.asarray(m, dtype=float)
    if m.shape != (mesh.n_nodes,):
        raise ValueError(f"monitor needs {mesh.n_nodes} nodal values, got shape {m.shape}")
    return m


def cell_integrals(mesh, monitor):
    """Vertex-rule monitor integrals ``area / 3 * sum of the three nodal values``."""
    m = _monitor_values(mesh, monitor)
    area, _ = element_geometry(mesh.coords, mesh.tris)
    return area * m[mesh.tris].sum(axis=1) / 3.0


def equi_loss(mesh, monitor):
    """Sum of squared deviations of the cell integrals from their mean."""
    check_untangled(mesh)
    I = cell_integrals(mesh, monitor)
    return float(np.sum((I - I.mean()) ** 2))


def equi_loss_grad(mesh, monitor, mask=True):
    """Coordinate gradient of :func:`equi_loss` with the nodal monitor held fixed.

    The mean is a function of the coordinates too, but its contribution
    vanishes because the deviations sum to zero.
    """
    check_untangled(mesh)
    m = _monitor_values(mesh, monitor)
    area, G = element_geometry(mesh.coords, mesh.tris)
    msum = m[mesh.tris].sum(axis=1) / 3.0
    I = area * msum
    r = 2.0 * (I - I.mean())
    # d area / d z_k = area * grad(phi_k)
    g = _scatter(mesh, (r * msum * area)[:, None, None] * G)
    return mask_gradient(mesh, g) if mask else g


def total_loss(mesh, spec, monitor, w_equi=1.0, reference=None, mask=True):
    """``E + w_equi * L_equi`` with its (masked) coordinate gradient."""
    E, g = adjoint_gradient(mesh, spec, reference=reference, mask=False)
    if w_equi:
        L = equi_loss(mesh, monitor)
        g = g + w_equi * equi_loss_grad(mesh, monitor, mask=False)
    else:
        L = equi_loss(mesh, monitor) if monitor is not None else 0.0
    if mask:
        g = mask_gradient(mesh, g)
    return LossBreakdown(E, L, float(w_equi), E + w_equi * L), g
