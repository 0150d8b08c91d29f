import numpy as np
import pytest

from meshmorph.adjoint import adjoint_gradient
from meshmorph.fem import ProblemSpec, recover_monitor, solve_poisson
from meshmorph.mesh import Mesh, TangledMeshError, build_rect_mesh
from meshmorph.objective import cell_integrals, equi_loss, equi_loss_grad, total_loss
from meshmorph.train import equi_descent
from conftest import jitter, random_spec


def _two_elements():
    coords = [(0, 0), (1, 0), (1, 1.5), (0, 0.5)]
    return Mesh(coords, [(0, 1, 3), (1, 2, 3)], [-2, -3, -4, -5], coords)


def test_two_element_example():
    m = _two_elements()
    assert np.allclose(cell_integrals(m, np.ones(4)), [0.25, 0.75])
    assert np.isclose(equi_loss(m, np.ones(4)), 0.125, rtol=1e-15)


def test_zero_cases(rng):
    m = build_rect_mesh(6, 6)
    assert equi_loss(m, np.ones(m.n_nodes)) < 1e-30
    assert np.abs(equi_loss_grad(m, np.ones(m.n_nodes))[m.interior_nodes]).max() < 1e-15
    mj = jitter(m, 0.3, rng)
    assert equi_loss(mj, np.zeros(m.n_nodes)) == 0.0


def test_rejects_tangled_and_bad_monitor():
    m = build_rect_mesh(3, 3)
    z = m.coords.copy()
    z[4] = [1.2, 0.3]
    with pytest.raises(TangledMeshError):
        equi_loss(m.with_coords(z), np.ones(9))
    with pytest.raises(ValueError):
        equi_loss(m, np.ones(4))


@pytest.mark.parametrize("seed", range(20))
def test_grad_matches_fd(seed):
    r = np.random.default_rng(seed)
    m = jitter(build_rect_mesh(5, 5), 0.3, r)
    mon = r.uniform(1, 6, m.n_nodes)
    g = equi_loss_grad(m, mon, mask=False)
    h = 1e-7
    fd = np.zeros_like(g)
    for i in range(m.n_nodes):
        for d in range(2):
            zp, zm = m.coords.copy(), m.coords.copy()
            zp[i, d] += h
            zm[i, d] -= h
            fd[i, d] = (equi_loss(m.with_coords(zp), mon) - equi_loss(m.with_coords(zm), mon)) / (2 * h)
    scale = np.abs(fd).max()
    assert np.max(np.abs(g - fd)) < 1e-6 * scale
    gm = equi_loss_grad(m, mon)
    assert np.all(gm[m.tags <= -2] == 0)


def test_total_loss_w0_is_adjoint(rng):
    m = jitter(build_rect_mesh(6, 6), 0.2, rng)
    spec = random_spec(rng)
    mon = recover_monitor(solve_poisson(m, spec))
    lb, g = total_loss(m, spec, mon, w_equi=0.0)
    E, ga = adjoint_gradient(m, spec)
    assert lb.E == E and lb.total == E and np.array_equal(g, ga)
    lb1, _ = total_loss(m, spec, mon, w_equi=1.0)
    assert lb1.total == lb1.E + lb1.L_equi and lb1.L_equi >= 0


def test_total_loss_zero():
    m = build_rect_mesh(5, 5)
    lb, g = total_loss(m, ProblemSpec.zero(), np.full(m.n_nodes, 2.0))
    assert lb.total < 1e-30 and np.abs(g).max() < 1e-15


def test_equi_descent_monotone(rng):
    m = jitter(build_rect_mesh(8, 8), 0.35, rng)
    res = equi_descent(m, np.ones(m.n_nodes), steps=50)
    assert np.all(np.diff(res.losses) <= 0)
    assert res.losses[-1] < res.losses[0]
