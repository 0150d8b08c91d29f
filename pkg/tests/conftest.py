import sys
import numpy as np
import pytest

from meshmorph.fem import Gaussian, ProblemSpec
from meshmorph.mesh import build_rect_mesh


def jitter(mesh, amp, rng):
    """Move interior nodes by up to ``amp`` mesh widths and edge nodes along their segment."""
    n = int(round(np.sqrt(mesh.n_nodes)))
    h = 1.0 / (n - 1)
    z = mesh.coords.copy()
    inner = mesh.interior_nodes
    z[inner] += rng.uniform(-amp, amp, (len(inner), 2)) * h
    edge = np.flatnonzero(mesh.tags >= 0)
    z[edge] += rng.uniform(-amp, amp, len(edge))[:, None] * h * mesh.tangent_dirs[edge]
    return mesh.with_coords(z)


def random_spec(rng, n_max=2, sigma=(0.1, 0.3)):
    gs = [Gaussian(tuple(rng.uniform(0.2, 0.8, 2)), float(rng.uniform(*sigma)), float(rng.uniform(0.5, 1.0)))
          for _ in range(int(rng.integers(1, n_max + 1)))]
    return ProblemSpec(tuple(gs))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit2():
    return build_rect_mesh(2, 2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
