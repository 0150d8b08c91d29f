import numpy as np
import pytest

from meshmorph.burgers import (BurgersConfig, BurgersOperator, NewtonError, burgers_step, interpolate_p1,
                               reference_trajectory, rollout_remesh)
from meshmorph.dataset import burgers_initial
from meshmorph.deformer import DeformerParams
from meshmorph.fem import ProblemSpec, assemble_mass
from meshmorph.mesh import build_rect_mesh
from conftest import jitter


def test_config_validation():
    with pytest.raises(ValueError):
        BurgersConfig(nu=0.0)
    with pytest.raises(ValueError):
        BurgersConfig(remesh_every=0)


def test_zero_state_fixed_point():
    m = build_rect_mesh(7, 7)
    out = burgers_step(m, np.zeros((49, 2)), BurgersConfig())
    assert np.abs(out.values).max() <= 1e-14


def test_newton_converges_quickly():
    m = build_rect_mesh(9, 9)
    cfg = BurgersConfig()
    U0 = burgers_initial(m, ProblemSpec.single(sigma=0.15))
    out, it = burgers_step(m, U0, cfg, return_iters=True)
    assert 1 <= it <= 5
    assert np.all(out.values[m.boundary_nodes] == 0)
    _, it_picard = burgers_step(m, U0, BurgersConfig(picard=True), return_iters=True)
    assert it_picard >= it


def test_newton_failure_reported():
    m = build_rect_mesh(9, 9)
    U0 = 50 * burgers_initial(m, ProblemSpec.single(sigma=0.15))
    with pytest.raises(NewtonError) as exc:
        burgers_step(m, U0, BurgersConfig(dt=1.0, newton_max_iter=1, newton_tol=1e-14))
    assert len(exc.value.history) == 2


def test_heat_decay():
    m = build_rect_mesh(9, 9)
    cfg = BurgersConfig(nu=0.1)
    U = burgers_initial(m, ProblemSpec.single(sigma=0.15))
    M = assemble_mass(m)
    energy = [np.sum(U * (M @ U))]
    for _ in range(5):
        U = burgers_step(m, U, cfg, advection=False).values
        energy.append(np.sum(U * (M @ U)))
    assert np.all(np.diff(energy) < 0)


def test_advection_jacobian_fd(rng):
    m = jitter(build_rect_mesh(6, 6), 0.2, rng)
    op = BurgersOperator(m)
    U = rng.standard_normal((m.n_nodes, 2))
    V = rng.standard_normal((m.n_nodes, 2))
    C = op.advection_jacobian(U)
    lin = np.column_stack([C[c][0] @ V[:, 0] + C[c][1] @ V[:, 1] for c in range(2)])
    lin += op.advection(U) @ V  # N(U) V part of the product rule
    h = 1e-6
    fd = (op.advection(U + h * V) @ (U + h * V) - op.advection(U - h * V) @ (U - h * V)) / (2 * h)
    assert np.abs(lin - fd).max() < 1e-7 * np.abs(fd).max()


@pytest.mark.parametrize("seed", range(10))
def test_interpolation_exact_on_affine(seed):
    r = np.random.default_rng(seed)
    a = jitter(build_rect_mesh(*(2 * [int(r.integers(4, 9))])), 0.3, r)
    b = jitter(build_rect_mesh(*(2 * [int(r.integers(4, 9))])), 0.3, r)
    c = r.standard_normal((3, 2))
    f = lambda x: c[0] + x[:, :1] * c[1] + x[:, 1:] * c[2]
    assert np.abs(interpolate_p1(f(a.coords), a, b) - f(b.coords)).max() < 1e-12


def test_interpolation_same_mesh_copy():
    m = build_rect_mesh(4, 4)
    v = np.arange(16.0)
    out = interpolate_p1(v, m, m)
    assert np.array_equal(out, v) and out is not v
    with pytest.raises(ValueError):
        interpolate_p1(np.zeros(3), m, m)


def test_reference_cache(tmp_path):
    spec = ProblemSpec.single(sigma=0.15)
    cfg = BurgersConfig(n_steps=2)
    fine, states = reference_trajectory(spec, cfg, 5, factor=2, cache_dir=tmp_path)
    assert fine.n_nodes == 81 and len(states) == 3
    assert len(list(tmp_path.glob("*.npy"))) == 1
    assert reference_trajectory(spec, cfg, 5, factor=2)[1] is states


def test_rollout_strategies(tmp_path):
    spec = ProblemSpec.single(sigma=0.15)
    cfg = BurgersConfig(n_steps=4, remesh_every=2)
    base = rollout_remesh(spec, cfg, "none", n=7, ref_factor=2)
    assert base.window_er == [0.0, 0.0] and base.mean_er == 0.0
    p = DeformerParams.init(d_lambda=4, n_blocks=2, T=8, seed=0, attention_scale=1.0)
    res = rollout_remesh(spec, cfg, "deformer", params=p, n=7, ref_factor=2, dump_dir=tmp_path / "traj")
    assert res.n_tangled == 0 and np.isfinite(res.mean_er)
    assert len(res.states) == 5 and res.times[-1] == pytest.approx(0.08)
    assert (tmp_path / "traj" / "index.json").exists()
    res = rollout_remesh(spec, cfg, "directopt", n=7, ref_factor=2, directopt_steps=5)
    assert np.isfinite(res.mean_er)
    with pytest.raises(ValueError):
        rollout_remesh(spec, cfg, "deformer", n=7)
    with pytest.raises(ValueError):
        rollout_remesh(spec, cfg, "magic", n=7)
