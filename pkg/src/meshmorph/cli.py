"""Command line entry point: ``meshmorph gen|train|directopt|bench|export``."""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import METHODS, benchmark, write_csv
from .dataset import gen_dataset, load_dataset
from .deformer import DeformerParams
from .fem import read_field
from .mesh import read_mesh, write_mesh
from .train import TrainingDiverged, direct_opt_record, train_deformer
from .vtk import export_vtk


def cmd_gen(args):
    man = gen_dataset(args.out, args.n, args.res, args.seed, pde=args.pde)
    print(f"wrote {man['n_samples']} {args.pde} samples to {args.out} (manifest {man['hash'][:12]})")


def cmd_train(args):
    recs = load_dataset(args.data)
    if recs and recs[0].pde != "poisson":
        sys.exit("training needs a poisson dataset")

    def report(epoch, loss):
        print(f"epoch {epoch:4d}  loss {loss:.6e}", flush=True)

    try:
        res = train_deformer(recs, epochs=args.epochs, lr=args.lr, w_equi=args.wequi, seed=args.seed,
                             ckpt=args.ckpt, callback=report)
    except TrainingDiverged as exc:
        sys.exit(f"training diverged: {exc}; last good checkpoint in {args.ckpt}")
    print(f"initial loss {res.curve[0]:.6e}, final {res.curve[-1]:.6e}, best epoch {res.best_epoch}")
    if res.n_tangled:
        print(f"warning: {res.n_tangled} tangled deformer outputs were skipped")
    curve_path = Path(args.ckpt).with_suffix(".curve.json")
    curve_path.write_text(json.dumps({"curve": res.curve, "best_epoch": res.best_epoch}))


def cmd_directopt(args):
    recs = load_dataset(args.data)
    ers = []
    for i, rec in enumerate(recs):
        res, er = direct_opt_record(rec, steps=args.steps, lr=args.lr, w_equi=args.wequi)
        ers.append(er)
        print(f"sample {i:4d}  ER {er:7.2f}%  steps {res.n_steps:4d}  ({res.stopped})  {res.adapt_time_ms:.0f} ms")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_mesh(res.mesh, Path(args.out) / f"mesh_{i:04d}.json")
    print(f"mean ER {np.mean(ers):.2f}%")


def cmd_bench(args):
    recs = load_dataset(args.data)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            sys.exit(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    ckpts = [DeformerParams.load(p) for p in (args.ckpt or [])]
    if "deformer" in methods and not ckpts:
        sys.exit("the deformer method needs --ckpt")
    _, summary = benchmark(recs, methods, ckpts, seeds=range(args.seeds), steps=args.steps)
    write_csv(summary, args.out)
    for row in summary:
        print(f"{row['method']:10s}  ER {row['er_mean']:7.2f} +- {row['er_std']:.2f}%  "
              f"time {row['time_ms']:9.2f} ms  aspect {row['aspect_mean']:.3f} +- {row['aspect_std']:.3f}")


def cmd_export(args):
    mesh = read_mesh(args.mesh)
    fields = {}
    for p in args.fields or []:
        name, values = read_field(p)
        if name in fields:
            name = Path(p).stem
        fields[name] = values
    export_vtk(mesh, fields, args.vtk)
    print(f"wrote {args.vtk}")


def build_parser():
    p = argparse.ArgumentParser(prog="meshmorph", description="r-adaptive P1 meshes by learned graph diffusion")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset of random Gaussian problems")
    g.add_argument("--pde", choices=["poisson", "burgers"], default="poisson")
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--res", type=int, nargs="+", default=[15], help="nodes per side (one or more)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the deformer with Adam")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--wequi", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ckpt", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("directopt", help="gradient descent on node positions per sample")
    d.add_argument("--data", required=True)
    d.add_argument("--steps", type=int, default=200)
    d.add_argument("--lr", type=float, default=0.1, help="max node move per step, in mean edge lengths")
    d.add_argument("--wequi", type=float, default=1.0)
    d.add_argument("--out", help="directory for the optimised meshes")
    d.set_defaults(func=cmd_directopt)

    b = sub.add_parser("bench", help="compare adaptation methods and write a CSV summary")
    b.add_argument("--data", required=True)
    b.add_argument("--methods", default="identity,directopt,deformer")
    b.add_argument("--ckpt", nargs="*", help="one checkpoint per seed (cycled)")
    b.add_argument("--seeds", type=int, default=5)
    b.add_argument("--steps", type=int, default=200, help="DirectOpt steps")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("export", help="write a mesh and nodal fields as legacy VTK")
    e.add_argument("--mesh", required=True)
    e.add_argument("--fields", nargs="*")
    e.add_argument("--vtk", required=True)
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
