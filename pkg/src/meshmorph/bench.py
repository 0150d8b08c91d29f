"""Benchmark harness: error reduction, adaptation time and aspect ratio per method."""
import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .deformer import DeformerParams, deform
from .fem import error_reduction, l2_error, solve_poisson
from .mesh import aspect_ratio, is_tangled
from .train import direct_opt

CSV_SCHEMA = "meshmorph-bench/1"
CSV_COLUMNS = ["method", "er_mean", "er_std", "time_ms", "aspect_mean", "aspect_std"]
METHODS = ("identity", "directopt", "deformer")


@dataclass(frozen=True)
class BenchRecord:
    method: str
    sample: int
    seed: int
    error_reduction_pct: float
    adapt_time_ms: float
    aspect_mean: float
    aspect_max: float
    tangled: bool = False


def n_workers():
    try:
        return max(1, int(os.environ.get("MESHMORPH_THREADS", "1")))
    except ValueError:
        return 1


def adapt(method, rec, params=None, steps=200, lr=0.1, w_equi=1.0):
    """Adapted mesh for one record and the wall time of the adaptation alone (ms)."""
    if method == "identity":
        return rec.mesh0, 0.0
    if method == "directopt":
        res = direct_opt(rec.mesh0, rec.spec, rec.monitor, steps, lr, w_equi)
        return res.mesh, res.adapt_time_ms
    if method == "deformer":
        if params is None:
            raise ValueError("deformer method needs a checkpoint")
        hn, mon = rec.fields()
        t0 = time.perf_counter()
        mesh, _ = deform(rec.mesh0, params, hn, mon)
        return mesh, 1e3 * (time.perf_counter() - t0)
    raise ValueError(f"unknown method {method!r}")


def evaluate_sample(method, i, rec, seed, params=None, **kw):
    mesh, ms = adapt(method, rec, params, **kw)
    bad = bool(is_tangled(mesh)[0])
    if method == "identity":
        er = 0.0
    else:
        er = error_reduction(rec.E0, l2_error(solve_poisson(mesh, rec.spec), spec=rec.spec))
    _, amean, amax = aspect_ratio(mesh)
    return BenchRecord(method, i, seed, float(er), float(ms), float(amean), float(amax), bad)


def benchmark(records, methods=METHODS, checkpoints=None, seeds=range(5), workers=None, **kw):
    """Per-sample records and a per-method summary over ``seeds``.

    With several checkpoints, seed ``k`` uses checkpoint ``k mod len``.  Methods
    that do not depend on the seed are run once and repeated, so their
    spread across seeds is zero.
    """
    seeds = list(seeds)
    if isinstance(checkpoints, DeformerParams):
        checkpoints = [checkpoints]
    if "deformer" in methods and not checkpoints:
        raise ValueError("deformer method needs at least one checkpoint")
    workers = workers or n_workers()
    rows = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for method in methods:
            cache = {}
            for k, seed in enumerate(seeds):
                params = checkpoints[k % len(checkpoints)] if method == "deformer" else None
                key = id(params)
                if key not in cache:
                    jobs = [pool.submit(evaluate_sample, method, i, rec, seed, params, **kw)
                            for i, rec in enumerate(records)]
                    cache[key] = [j.result() for j in jobs]  # sample order, not completion order
                rows.extend(BenchRecord(**dict(asdict(r), seed=seed)) for r in cache[key])
    return rows, summarize(rows, methods, seeds)


def summarize(rows, methods, seeds):
    out = []
    for method in methods:
        er, tm, asp = [], [], []
        for seed in seeds:
            sel = [r for r in rows if r.method == method and r.seed == seed]
            er.append(np.mean([r.error_reduction_pct for r in sel]))
            tm.append(np.mean([r.adapt_time_ms for r in sel]))
            asp.append(np.mean([r.aspect_mean for r in sel]))
        out.append({
            "method": method,
            "er_mean": float(np.mean(er)),
            "er_std": float(np.std(er)),
            "time_ms": float(np.mean(tm)),
            "aspect_mean": float(np.mean(asp)),
            "aspect_std": float(np.std(asp)),
        })
    return out


def write_csv(summary, path):
    with open(path, "w", newline="") as f:
        f.write(f"# schema: {CSV_SCHEMA}\n")
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for row in summary:
            w.writerow({k: row[k] for k in CSV_COLUMNS})


def read_csv(path):
    with open(path, newline="") as f:
        first = f.readline().strip()
        if first != f"# schema: {CSV_SCHEMA}":
            raise ValueError(f"{path}: not a {CSV_SCHEMA} file")
        return list(csv.DictReader(f))
