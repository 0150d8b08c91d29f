"""Viscous Burgers with P1 velocities, backward Euler in time, Newton per step.

Residual for the free nodal values ``U`` (both components, zero Dirichlet data)::

    M (U - U_old) / dt + N(U) U + nu K U = 0,    N(U)_ij = int phi_i (u . grad phi_j)

The advection integral is exact for P1 data: ``grad phi_j`` is constant per
element, leaving only mass-matrix integrals of ``phi_i u``.
"""
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dataset import burgers_initial
from .deformer import deform
from .fem import (LOCAL_MASS, FemField, assemble_mass, assemble_stiffness, element_geometry, error_reduction,
                  recover_hessian, recover_monitor, vector_l2_error, write_field)
from .linalg import SolverError, lu_solve
from .mesh import PointLocator, TangledMeshError, build_rect_mesh, check_untangled, is_tangled, write_mesh

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BurgersConfig:
    nu: float = 0.01
    dt: float = 0.02
    n_steps: int = 20
    remesh_every: int = 2
    newton_tol: float = 1e-10
    newton_max_iter: int = 20
    picard: bool = False

    def __post_init__(self):
        if not self.nu > 0 or not self.dt > 0:
            raise ValueError("viscosity and time step must be positive")
        if self.remesh_every < 1 or self.n_steps < 0:
            raise ValueError("remesh_every must be >= 1 and n_steps >= 0")


class NewtonError(SolverError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def _scatter(mesh, local):
    t = mesh.tris
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((local.reshape(-1), (rows, cols)), shape=(n, n))


class BurgersOperator:
    """Mesh-dependent matrices, assembled once per mesh."""

    def __init__(self, mesh):
        check_untangled(mesh)
        self.mesh = mesh
        self.area, self.G = element_geometry(mesh.coords, mesh.tris)
        self.Mloc = self.area[:, None, None] * LOCAL_MASS
        self.M = assemble_mass(mesh)
        self.K = assemble_stiffness(mesh)
        self.free = mesh.interior_nodes

    def advection(self, U):
        """``N(U)`` with ``N_ij = sum_T grad phi_j . (Mloc U_T)_i``."""
        ue = U[self.mesh.tris]                                  # (T, 3, 2)
        mu = np.einsum("tik,tkd->tid", self.Mloc, ue)           # int phi_i u
        return _scatter(self.mesh, np.einsum("tid,tjd->tij", mu, self.G))

    def advection_jacobian(self, U):
        """Blocks ``C[c][d]`` of d(N(U) U_c)/dU_d, i.e. ``sum_T Mloc_ik (d_d U_c)_T``."""
        gu = np.einsum("tkc,tkd->tcd", U[self.mesh.tris], self.G)  # (T, comp, dir)
        return [[_scatter(self.mesh, self.Mloc * gu[:, c, d][:, None, None]) for d in range(2)]
                for c in range(2)]


def burgers_step(mesh, state, cfg, op=None, advection=True, return_iters=False):
    """One backward-Euler step from ``state`` ((N, 2) values or FemField).

    ``advection=False`` drops the nonlinear term (heat equation), a test hook.
    """
    op = op or BurgersOperator(mesh)
    U_old = np.asarray(getattr(state, "values", state), dtype=float)
    if U_old.shape != (mesh.n_nodes, 2):
        raise ValueError(f"state must be (N, 2), got {U_old.shape}")
    free = op.free
    nf = free.size
    U = U_old.copy()
    U[mesh.boundary_nodes] = 0.0
    if nf == 0:
        return (FemField(mesh, U), 0) if return_iters else FemField(mesh, U)
    Mf = op.M[free][:, free]
    Kf = op.K[free][:, free]
    L = op.M / cfg.dt + cfg.nu * op.K

    def residual(U):
        R = L @ U - op.M @ U_old / cfg.dt
        if advection:
            R = R + op.advection(U) @ U
        return R[free].T.ravel()

    R = residual(U)
    r0 = np.linalg.norm(R)
    history = [r0]
    target = cfg.newton_tol * (1.0 + r0)
    it = 0
    while history[-1] > target:
        if it == cfg.newton_max_iter:
            raise NewtonError(f"Newton did not converge in {it} iterations "
                              f"(residual {history[-1]:.3e}, target {target:.3e})", history)
        base = (Mf / cfg.dt + cfg.nu * Kf).tocsr()
        if advection:
            base = base + op.advection(U)[free][:, free]
        blocks = [[base, None], [None, base]]
        if advection and not cfg.picard:
            C = op.advection_jacobian(U)
            blocks = [[base + C[0][0][free][:, free], C[0][1][free][:, free]],
                      [C[1][0][free][:, free], base + C[1][1][free][:, free]]]
        J = sp.bmat(blocks, format="csr")
        delta = lu_solve(J, -R)
        U[free, 0] += delta[:nf]
        U[free, 1] += delta[nf:]
        R = residual(U)
        history.append(np.linalg.norm(R))
        it += 1
        if not np.isfinite(history[-1]):
            raise NewtonError("Newton diverged (non-finite residual)", history)
    out = FemField(mesh, U)
    return (out, it) if return_iters else out


def interpolate_p1(values, mesh_from, mesh_to, locator=None):
    """Evaluate the P1 field on ``mesh_from`` at the nodes of ``mesh_to``."""
    v = np.asarray(getattr(values, "values", values), dtype=float)
    if v.shape[0] != mesh_from.n_nodes:
        raise ValueError("field does not live on mesh_from")
    if mesh_to is mesh_from or (mesh_to.coords.shape == mesh_from.coords.shape
                                and np.array_equal(mesh_to.coords, mesh_from.coords)
                                and np.array_equal(mesh_to.tris, mesh_from.tris)):
        return v.copy()
    locator = locator or PointLocator(mesh_from)
    tri, lam = locator.locate(mesh_to.coords)
    return np.einsum("nk,nk...->n...", lam, v[mesh_from.tris[tri]])


# ---------------------------------------------------------------------------
# rollout


@dataclass
class RolloutResult:
    strategy: str
    times: list
    meshes: list                 # mesh in use at each recorded time
    states: list                 # (N, 2) arrays at each recorded time
    window_errors: list          # squared L2 error vs the fine reference at each window end
    baseline_errors: list        # same for the uniform run
    window_er: list
    mean_er: float
    n_tangled: int = 0
    newton_iters: list = field(default_factory=list)
    adapt_time_ms: float = 0.0


_REFERENCE_CACHE = {}


def _time_loop(mesh, U, cfg, n_steps, op=None):
    op = op or BurgersOperator(mesh)
    states = [U]
    iters = []
    for _ in range(n_steps):
        f, it = burgers_step(mesh, states[-1], cfg, op=op, return_iters=True)
        states.append(f.values)
        iters.append(it)
    return states, iters


def reference_trajectory(spec, cfg, n, factor=4, cache_dir=None):
    """Fine uniform-mesh trajectory (``factor`` times finer per side), cached in memory and optionally on disk."""
    nf = factor * (n - 1) + 1
    key = (json.dumps(spec.to_dict(), sort_keys=True), json.dumps(asdict(cfg), sort_keys=True), nf)
    if key in _REFERENCE_CACHE:
        return _REFERENCE_CACHE[key]
    path = None
    fine = build_rect_mesh(nf, nf)
    if cache_dir is not None:
        path = Path(cache_dir) / f"burgers_ref_{hashlib.sha256(repr(key).encode()).hexdigest()[:16]}.npy"
        if path.exists():
            states = list(np.load(path))
            _REFERENCE_CACHE[key] = (fine, states)
            return fine, states
    states, _ = _time_loop(fine, burgers_initial(fine, spec), cfg, cfg.n_steps)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, np.array(states))
    _REFERENCE_CACHE[key] = (fine, states)
    return fine, states


def speed_features(mesh0, mesh, U):
    """Speed of the state moved onto ``mesh0``, and its Hessian norm and monitor."""
    speed = FemField(mesh0, np.linalg.norm(interpolate_p1(U, mesh, mesh0), axis=1))
    _, hn = recover_hessian(speed)
    return hn, recover_monitor(speed)


def rollout_remesh(spec, cfg, strategy="none", params=None, n=15, ref_factor=4, cache_dir=None,
                   directopt_steps=50, dump_dir=None):
    """Advance from the Gaussian initial data, re-adapting the mesh every ``cfg.remesh_every`` steps.

    Strategies: ``none`` keeps the uniform mesh, ``deformer`` runs the learned
    deformer from the uniform mesh, ``directopt`` descends the equidistribution
    loss (the PDE error needs the unknown solution, so it is left out).
    ER per window compares against the uniform run at the same time.
    """
    from .train import equi_descent

    if strategy not in ("none", "deformer", "directopt"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "deformer" and params is None:
        raise ValueError("the deformer strategy needs trained parameters")
    mesh0 = build_rect_mesh(n, n)
    fine, ref = reference_trajectory(spec, cfg, n, ref_factor, cache_dir)
    ref_fields = [FemField(fine, r) for r in ref]

    base_states, _ = _time_loop(mesh0, burgers_initial(mesh0, spec), cfg, cfg.n_steps)

    mesh = mesh0
    U = burgers_initial(mesh0, spec)
    times, meshes, states = [0.0], [mesh0], [U]
    errs, base_errs, ers, iters = [], [], [], []
    n_tangled = 0
    adapt_ms = 0.0
    op = BurgersOperator(mesh)
    step = 0
    while step < cfg.n_steps:
        if strategy != "none":
            hn, mon = speed_features(mesh0, mesh, U)
            t0 = time.perf_counter()
            if strategy == "deformer":
                new, _ = deform(mesh0, params, hn, mon)
            else:
                new = equi_descent(mesh0, mon.values, steps=directopt_steps).mesh
            adapt_ms += 1e3 * (time.perf_counter() - t0)
            bad, tris = is_tangled(new)
            if bad:
                n_tangled += 1
                raise TangledMeshError(f"adapted mesh at step {step} is tangled", tris)
            # the initial data is analytic, so sample it rather than interpolate
            U = burgers_initial(new, spec) if step == 0 else interpolate_p1(U, mesh, new)
            mesh = new
            op = BurgersOperator(mesh)
        for _ in range(min(cfg.remesh_every, cfg.n_steps - step)):
            f, it = burgers_step(mesh, U, cfg, op=op, return_iters=True)
            U = f.values
            step += 1
            iters.append(it)
            times.append(step * cfg.dt)
            meshes.append(mesh)
            states.append(U)
        e = vector_l2_error(U, mesh, ref_fields[step])
        e0 = vector_l2_error(base_states[step], mesh0, ref_fields[step])
        errs.append(e)
        base_errs.append(e0)
        ers.append(0.0 if strategy == "none" else error_reduction(e0, e))
    res = RolloutResult(strategy, times, meshes, states, errs, base_errs, ers,
                        float(np.mean(ers)) if ers else 0.0, n_tangled, iters, adapt_ms)
    if dump_dir is not None:
        dump_trajectory(res, dump_dir)
    return res


def dump_trajectory(res, out_dir):
    """One mesh file and one field file per snapshot plus ``index.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (t, mesh, U) in enumerate(zip(res.times, res.meshes, res.states)):
        mname, fname = f"mesh_{k:04d}.json", f"u_{k:04d}.json"
        write_mesh(mesh, out / mname)
        write_field(U, out / fname, name="velocity")
        entries.append({"time": t, "mesh": mname, "field": fname})
    (out / "index.json").write_text(json.dumps({"strategy": res.strategy, "snapshots": entries}, indent=1))
