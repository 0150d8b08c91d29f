"""Legacy ASCII VTK output for triangle meshes, plus a small reader for tests."""
import numpy as np

VTK_TRIANGLE = 5


def export_vtk(mesh, fields, path, title="meshmorph"):
    """Write POINTS (z = 0), triangle CELLS and per-node POINT_DATA.

    ``fields`` maps names to (N,) scalars or (N, 2) vectors; a list is named
    ``field0, field1, ...``.
    """
    if not isinstance(fields, dict):
        fields = {f"field{i}": v for i, v in enumerate(fields)}
    n = mesh.n_nodes
    data = {}
    for name, v in fields.items():
        v = np.asarray(getattr(v, "values", v), dtype=float)
        if v.shape[0] != n:
            raise ValueError(f"field {name!r} has {v.shape[0]} values, mesh has {n} nodes")
        if v.ndim > 2 or (v.ndim == 2 and v.shape[1] != 2):
            raise ValueError(f"field {name!r} must be scalar or 2-vector per node")
        if " " in name:
            raise ValueError(f"field name {name!r} may not contain spaces")
        data[name] = v
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {n} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.coords.tolist()]
    nt = mesh.n_tris
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.tris.tolist()]
    lines.append(f"CELL_TYPES {nt}")
    lines += [str(VTK_TRIANGLE)] * nt
    if data:
        lines.append(f"POINT_DATA {n}")
        for name, v in data.items():
            if v.ndim == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [repr(x) for x in v.tolist()]
            else:
                lines.append(f"VECTORS {name} double")
                lines += [f"{x!r} {y!r} 0.0" for x, y in v.tolist()]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_vtk(path):
    """Parse files written by :func:`export_vtk`: ``(points (N, 3), tris, cell_types, fields)``."""
    with open(path) as f:
        tok = [line.strip() for line in f if line.strip()]
    if not tok[0].startswith("# vtk DataFile"):
        raise ValueError(f"{path}: not a legacy VTK file")
    i = tok.index(next(t for t in tok if t.startswith("POINTS")))
    n = int(tok[i].split()[1])
    pts = np.array([list(map(float, t.split())) for t in tok[i + 1:i + 1 + n]])
    i += 1 + n
    nt = int(tok[i].split()[1])
    cells = np.array([list(map(int, t.split())) for t in tok[i + 1:i + 1 + nt]])
    if np.any(cells[:, 0] != 3):
        raise ValueError("only triangle cells are supported")
    i += 1 + nt
    types = np.array([int(t) for t in tok[i + 1:i + 1 + nt]])
    i += 1 + nt
    fields = {}
    if i < len(tok) and tok[i].startswith("POINT_DATA"):
        i += 1
        while i < len(tok):
            head = tok[i].split()
            if head[0] == "SCALARS":
                fields[head[1]] = np.array([float(t) for t in tok[i + 2:i + 2 + n]])
                i += 2 + n
            elif head[0] == "VECTORS":
                fields[head[1]] = np.array([list(map(float, t.split()))[:2] for t in tok[i + 1:i + 1 + n]])
                i += 1 + n
            else:
                raise ValueError(f"unexpected VTK section {head[0]!r}")
    return pts, cells[:, 1:], types, fields
