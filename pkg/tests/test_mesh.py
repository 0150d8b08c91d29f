import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshmorph.mesh import (INTERIOR, Mesh, MeshError, PointLocator, TangledMeshError, aspect_ratio,
                            boundary_distance, build_rect_mesh, check_boundary, check_untangled, is_tangled,
                            mask_gradient, mesh_graph, mesh_io, read_mesh, signed_area, signed_areas,
                            write_mesh)
from conftest import jitter


def tri_mesh(pts):
    return Mesh(np.array(pts, float), [[0, 1, 2]], [INTERIOR] * 3, [(0, 0), (1, 0), (1, 1), (0, 1)])


def test_rect_counts():
    m = build_rect_mesh(2, 2)
    assert (m.n_nodes, m.n_tris) == (4, 2)
    m = build_rect_mesh(15, 15)
    assert (m.n_nodes, m.n_tris) == (225, 392)
    assert np.all(signed_areas(m) > 0)


def test_rect_rejects_small():
    with pytest.raises(MeshError):
        build_rect_mesh(2, 1)


def test_rect_tags():
    m = build_rect_mesh(4, 3, domain=(0, 2, 0, 1))
    assert np.sum(m.tags <= -2) == 4
    assert np.sum(m.tags >= 0) == 2 * (2 + 1)
    assert len(m.interior_nodes) == 2
    check_boundary(m)
    assert boundary_distance(m) == 0.0


def test_signed_area_examples():
    assert signed_area(tri_mesh([(0, 0), (1, 0), (0, 1)]), 0) == 0.5
    assert signed_area(tri_mesh([(0, 0), (0, 1), (1, 0)]), 0) == -0.5
    assert signed_areas(build_rect_mesh(2, 2)).sum() == 1.0


@given(st.integers(2, 12), st.integers(2, 12))
@settings(max_examples=25, deadline=None)
def test_areas_partition_rectangle(nx, ny):
    m = build_rect_mesh(nx, ny, domain=(0, 3, -1, 1))
    assert np.isclose(signed_areas(m).sum(), 6.0, rtol=1e-13)


def test_tangled_detection():
    m = build_rect_mesh(3, 3)
    assert is_tangled(m) == (False, [])
    z = m.coords.copy()
    # reflect the centre node across the edge of one of its triangles
    z[4] = [1.2, 0.3]
    bad, tris = is_tangled(m.with_coords(z))
    assert bad and len(tris) >= 1
    for t in tris:
        assert signed_area(m.with_coords(z), t) <= 0
    with pytest.raises(TangledMeshError) as exc:
        check_untangled(m.with_coords(z))
    assert exc.value.triangles == tris


def test_single_flip_reports_that_triangle():
    m = build_rect_mesh(3, 3)
    z = m.coords.copy()
    # push node 4 just past the diagonal of the lower triangle (0, 1, 4)... only triangles around 4 can flip
    z[4] = [0.6, 0.05]
    mm = m.with_coords(z)
    bad, tris = is_tangled(mm)
    assert bad
    assert all(4 in m.tris[t] for t in tris)


def test_degenerate_is_tangled():
    assert is_tangled(tri_mesh([(0, 0), (1, 1), (2, 2)]))[0]


def test_aspect_ratio_fixtures():
    vals, mean, mx = aspect_ratio(tri_mesh([(0, 0), (1, 0), (0.5, np.sqrt(3) / 2)]))
    assert abs(vals[0] - 2 / np.sqrt(3)) < 1e-12
    vals, mean, mx = aspect_ratio(tri_mesh([(0, 0), (1, 0), (0, 1)]))
    assert abs(vals[0] - 2.0) < 1e-12
    with pytest.raises(MeshError, match="0"):
        aspect_ratio(tri_mesh([(0, 0), (1, 1), (2, 2)]))


def test_aspect_lower_bound(rng):
    m = jitter(build_rect_mesh(8, 8), 0.3, rng)
    vals, mean, mx = aspect_ratio(m)
    assert np.all(vals >= 2 / np.sqrt(3) - 1e-12)
    assert mean <= mx


def test_graph_examples():
    g = mesh_graph(build_rect_mesh(2, 2))
    # diagonal 0-3
    assert list(g.degree()) == [3, 2, 2, 3]
    g = mesh_graph(tri_mesh([(0, 0), (1, 0), (0, 1)]))
    assert list(g.degree()) == [2, 2, 2]
    m = build_rect_mesh(15, 15)
    deg = m.graph.degree()
    assert np.all(deg[m.interior_nodes] == 6)


@pytest.mark.parametrize("n", [2, 3, 7, 15])
def test_graph_symmetric_sorted_connected(n):
    m = build_rect_mesh(n, n)
    g = m.graph
    pairs = set(zip(g.src.tolist(), g.dst.tolist()))
    assert all((j, i) in pairs for i, j in pairs)
    assert all(i != j for i, j in pairs)
    for i in range(g.n_nodes):
        nb = g.neighbors(i)
        assert np.all(np.diff(nb) > 0)
    seen, stack = {0}, [0]
    while stack:
        for j in g.neighbors(stack.pop()):
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    assert len(seen) == m.n_nodes


def test_graph_matches_shared_triangles(rng):
    m = build_rect_mesh(5, 4)
    share = set()
    for t in m.tris:
        for a in t:
            for b in t:
                if a != b:
                    share.add((int(a), int(b)))
    g = m.graph
    assert set(zip(g.src.tolist(), g.dst.tolist())) == share


def test_mesh_io_roundtrip(tmp_path, rng):
    m = jitter(build_rect_mesh(15, 15), 0.2, rng)
    p = tmp_path / "m.json"
    mesh_io(p, "write", m)
    r = mesh_io(p, "read")
    assert np.array_equal(r.coords, m.coords)
    assert np.array_equal(r.tris, m.tris)
    assert np.array_equal(r.tags, m.tags)


def test_mesh_io_errors(tmp_path):
    m = build_rect_mesh(3, 3)
    p = tmp_path / "m.json"
    write_mesh(m, p)
    d = json.loads(p.read_text())
    bad = dict(d, tris=d["tris"] + [[0, 1, 9]])
    p.write_text(json.dumps(bad))
    with pytest.raises(MeshError):
        read_mesh(p)
    d.pop("version")
    p.write_text(json.dumps(d))
    with pytest.raises(MeshError, match="version"):
        read_mesh(p)
    with pytest.raises(ValueError):
        mesh_io(p, "append")


def test_mesh_io_tangled_warns(tmp_path):
    m = build_rect_mesh(3, 3)
    z = m.coords.copy()
    z[4] = [1.2, 0.3]
    write_mesh(m.with_coords(z), tmp_path / "t.json")
    with pytest.warns(UserWarning, match="tangled"):
        read_mesh(tmp_path / "t.json")


def test_mask_gradient(rng):
    m = build_rect_mesh(5, 5)
    g = rng.standard_normal((m.n_nodes, 2))
    mg = mask_gradient(m, g)
    assert np.all(mg[m.tags <= -2] == 0)
    bottom = m.tags == 0
    assert np.all(mg[bottom, 1] == 0)
    assert np.array_equal(mg[m.interior_nodes], g[m.interior_nodes])
    assert np.array_equal(mask_gradient(m, mg), mg)


def test_point_locator(rng):
    m = jitter(build_rect_mesh(9, 9), 0.3, rng)
    pts = rng.uniform(0, 1, (500, 2))
    tri, lam = PointLocator(m).locate(pts)
    assert np.all(lam >= -1e-10)
    rec = np.einsum("nk,nkd->nd", lam, m.coords[m.tris[tri]])
    assert np.allclose(rec, pts, atol=1e-13)
    with pytest.raises(MeshError):
        PointLocator(m).locate(np.array([[1.5, 0.5]]))
