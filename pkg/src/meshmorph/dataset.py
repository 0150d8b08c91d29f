"""Random Gaussian problem sets and their cached per-sample fields."""
import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fem import FemField, Gaussian, ProblemSpec, l2_error, recover_hessian, recover_monitor, solve_poisson
from .mesh import build_rect_mesh, mesh_from_dict, mesh_to_dict

DATASET_VERSION = 1
MIN_SIGMA = 0.01  # below this the 6-point rule no longer resolves a bump at desk resolutions

DEFAULT_RANGES = {
    "n_gaussians": (1, 3),
    "center": (0.2, 0.8),
    "sigma": (0.05, 0.2),
    "amplitude": (0.5, 1.0),
}


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def burgers_initial(mesh, spec):
    """Both velocity components equal the Gaussian sum, zeroed on the boundary."""
    u = spec.value(mesh.coords)
    u[mesh.boundary_nodes] = 0.0
    return np.column_stack([u, u])


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    spec: ProblemSpec
    mesh0: object
    U: np.ndarray
    hess_norm: np.ndarray
    monitor: np.ndarray
    E0: float
    pde: str = "poisson"

    @classmethod
    def build(cls, spec, mesh0, pde="poisson"):
        """Solve (Poisson) or sample (Burgers initial speed) on ``mesh0`` and cache the features."""
        if pde == "poisson":
            U = solve_poisson(mesh0, spec)
            E0 = l2_error(U, spec=spec)
            if not E0 > 0:
                raise ValueError("baseline error is zero; the sample carries no signal")
        elif pde == "burgers":
            U = FemField(mesh0, np.linalg.norm(burgers_initial(mesh0, spec), axis=1))
            E0 = float("nan")
        else:
            raise ValueError(f"unknown pde {pde!r}")
        _, hn = recover_hessian(U)
        mon = recover_monitor(U)
        return cls(spec, mesh0, U.values, hn.values, mon.values, float(E0), pde)

    def fields(self):
        """``(hess_norm, monitor)`` as FemFields on ``mesh0``."""
        return FemField(self.mesh0, self.hess_norm), FemField(self.mesh0, self.monitor)

    def to_dict(self):
        d = {
            "version": DATASET_VERSION,
            "pde": self.pde,
            "spec": self.spec.to_dict(),
            "mesh": mesh_to_dict(self.mesh0),
            "U": self.U.tolist(),
            "hess_norm": self.hess_norm.tolist(),
            "monitor": self.monitor.tolist(),
            "E0": None if np.isnan(self.E0) else self.E0,
        }
        d["hash"] = _digest(d)
        return d

    @classmethod
    def from_dict(cls, d, verify=False):
        if d.get("version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset record version {d.get('version')!r}")
        body = {k: v for k, v in d.items() if k != "hash"}
        if "hash" in d and _digest(body) != d["hash"]:
            raise ValueError("dataset record hash mismatch (file edited or corrupted)")
        spec = ProblemSpec.from_dict(d["spec"])
        mesh0 = mesh_from_dict(d["mesh"])
        E0 = float("nan") if d["E0"] is None else float(d["E0"])
        rec = cls(spec, mesh0, np.asarray(d["U"], float), np.asarray(d["hess_norm"], float),
                  np.asarray(d["monitor"], float), E0, d.get("pde", "poisson"))
        if verify:
            fresh = cls.build(spec, mesh0, rec.pde)
            for name in ("U", "hess_norm", "monitor"):
                if not np.allclose(getattr(fresh, name), getattr(rec, name), rtol=1e-9, atol=1e-12):
                    raise ValueError(f"cached {name} does not reproduce from spec and mesh")
        return rec


def sample_spec(rng, ranges=None):
    r = dict(DEFAULT_RANGES, **(ranges or {}))
    lo, hi = r["n_gaussians"]
    gs = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        c = rng.uniform(*r["center"], size=2)
        gs.append(Gaussian(tuple(c), float(rng.uniform(*r["sigma"])), float(rng.uniform(*r["amplitude"]))))
    return ProblemSpec(tuple(gs))


def make_records(n_samples, resolutions, seed, ranges=None, pde="poisson"):
    """In-memory dataset: sample ``i`` draws its spec and its resolution from one seeded stream."""
    rng = np.random.default_rng(seed)
    resolutions = [resolutions] if np.isscalar(resolutions) else list(resolutions)
    if ranges and ranges.get("sigma", (1.0,))[0] < MIN_SIGMA:
        warnings.warn(f"sigma lower bound {ranges['sigma'][0]} is below {MIN_SIGMA}; "
                      "bumps will be under-resolved by the quadrature")
    recs = []
    for _ in range(n_samples):
        spec = sample_spec(rng, ranges)
        n = int(resolutions[rng.integers(len(resolutions))])
        recs.append(DatasetRecord.build(spec, build_rect_mesh(n, n), pde))
    return recs


def gen_dataset(out_dir, n_samples, resolutions, seed, ranges=None, pde="poisson"):
    """Write ``sample_XXXX.json`` files and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        recs = make_records(n_samples, resolutions, seed, ranges, pde)
    files = []
    for i, rec in enumerate(recs):
        d = rec.to_dict()
        name = f"sample_{i:04d}.json"
        (out / name).write_text(json.dumps(d))
        files.append({"file": name, "hash": d["hash"]})
    manifest = {
        "version": DATASET_VERSION,
        "pde": pde,
        "seed": seed,
        "n_samples": n_samples,
        "resolutions": [int(r) for r in np.atleast_1d(resolutions)],
        "ranges": {k: list(v) for k, v in dict(DEFAULT_RANGES, **(ranges or {})).items()},
        "samples": files,
    }
    manifest["hash"] = _digest(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_dataset(data_dir, verify=False):
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    recs = []
    for entry in manifest["samples"]:
        rd = json.loads((d / entry["file"]).read_text())
        if rd.get("hash") != entry["hash"]:
            raise ValueError(f"{entry['file']}: hash differs from the manifest")
        recs.append(DatasetRecord.from_dict(rd, verify=verify))
    return recs
