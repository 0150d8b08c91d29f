"""Coordinate descent baseline (DirectOpt) and deformer training with Adam."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .deformer import DeformerParams, backward_params, deform, grad_vector
from .fem import error_reduction, l2_error, solve_poisson
from .mesh import TangledMeshError, is_tangled
from .objective import equi_loss, equi_loss_grad, total_loss

log = logging.getLogger(__name__)


def mean_edge_length(mesh):
    g = mesh.graph
    return float(np.mean(np.linalg.norm(mesh.coords[g.dst] - mesh.coords[g.src], axis=1)))


# ---------------------------------------------------------------------------
# DirectOpt


@dataclass
class DirectOptResult:
    mesh: object
    losses: list
    n_steps: int
    stopped: str
    adapt_time_ms: float


def _descend(mesh0, evaluate, steps, lr, window=10, rel_tol=1e-8):
    """Backtracking gradient descent on node positions.

    ``evaluate(mesh) -> (loss, masked gradient)``.  A trial step moves the
    fastest node by ``lr`` times the mean edge length of ``mesh0`` (or twice
    the last accepted step if smaller) and is halved until the mesh stays
    untangled and the loss does not increase.
    """
    t0 = time.perf_counter()
    h = lr * mean_edge_length(mesh0)
    mesh = mesh0
    loss, g = evaluate(mesh)
    losses = [loss]
    step = h
    stopped = "steps"
    n = 0
    for n in range(1, steps + 1):
        gmax = np.abs(g).max()
        if gmax == 0.0:
            stopped = "stationary"
            n -= 1
            break
        trial = min(h, 2.0 * step)
        accepted = False
        for _ in range(40):
            cand = mesh.with_coords(mesh.coords - (trial / gmax) * g)
            if not is_tangled(cand)[0]:
                c_loss, c_g = evaluate(cand)
                if c_loss <= loss:
                    accepted = True
                    break
            trial *= 0.5
        if not accepted:
            stopped = "line search"
            n -= 1
            break
        mesh, loss, g, step = cand, c_loss, c_g, trial
        losses.append(loss)
        if len(losses) > window and abs(losses[-1 - window] - loss) <= rel_tol * abs(losses[-1 - window]):
            stopped = "stagnation"
            break
    return DirectOptResult(mesh, losses, n, stopped, 1e3 * (time.perf_counter() - t0))


def direct_opt(mesh0, spec, monitor, steps=200, lr=0.1, w_equi=1.0, reference=None):
    """Minimise ``E + w_equi * L_equi`` over node positions starting from ``mesh0``."""

    def evaluate(mesh):
        lb, g = total_loss(mesh, spec, monitor, w_equi, reference=reference)
        return lb.total, g

    return _descend(mesh0, evaluate, steps, lr)


def equi_descent(mesh0, monitor, steps=200, lr=0.1):
    """Descent on the equidistribution loss alone (no PDE error term)."""

    def evaluate(mesh):
        return equi_loss(mesh, monitor), equi_loss_grad(mesh, monitor)

    return _descend(mesh0, evaluate, steps, lr)


def direct_opt_record(rec, steps=200, lr=0.1, w_equi=1.0):
    """DirectOpt on a dataset record; returns the result and its error reduction."""
    res = direct_opt(rec.mesh0, rec.spec, rec.monitor, steps, lr, w_equi)
    E = l2_error(solve_poisson(res.mesh, rec.spec), spec=rec.spec)
    return res, error_reduction(rec.E0, E)


# ---------------------------------------------------------------------------
# Adam


class Adam:
    def __init__(self, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, x, g):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# deformer training


class TrainingDiverged(RuntimeError):
    def __init__(self, message, params):
        super().__init__(message)
        self.params = params


@dataclass
class TrainResult:
    params: DeformerParams
    curve: list
    best_epoch: int
    n_tangled: int = 0
    epoch_times: list = field(default_factory=list)


def sample_loss(params, rec, w_equi=1.0, grad=True):
    """Deform ``rec.mesh0``, score the result, and backpropagate to the weights."""
    hn, mon = rec.fields()
    mesh, tape = deform(rec.mesh0, params, hn, mon)
    lb, gZ = total_loss(mesh, rec.spec, rec.monitor, w_equi)
    if not grad:
        return lb, mesh, None
    return lb, mesh, grad_vector(params, backward_params(tape, gZ))


def evaluate_loss(params, records, w_equi=1.0):
    return float(np.mean([sample_loss(params, r, w_equi, grad=False)[0].total for r in records]))


def train_deformer(records, epochs=300, lr=1e-3, w_equi=1.0, seed=0, params=None, ckpt=None,
                   callback=None):
    """Per-sample Adam on the deformer weights.

    ``curve[0]`` is the mean loss of the initial weights; ``curve[k]`` is the mean
    of the per-sample losses seen during epoch ``k``.  The best epoch is saved to
    ``ckpt`` whenever it improves.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = DeformerParams.init(seed=int(rng.integers(2**31)))
    x = params.vector()
    opt = Adam(x.size, lr=lr)
    curve = [evaluate_loss(params, records, w_equi)]
    best, best_epoch, best_params = curve[0], 0, params
    if ckpt is not None:
        params.save(ckpt)
    n_tangled = 0
    times = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for i in rng.permutation(len(records)):
            p = params.with_vector(x)
            try:
                lb, _, g = sample_loss(p, records[i], w_equi)
            except TangledMeshError:
                # the diffusion guarantee is not per element; skip rather than crash
                n_tangled += 1
                log.warning("epoch %d sample %d: deformer output tangled, update skipped", epoch, i)
                continue
            if not (np.isfinite(lb.total) and np.all(np.isfinite(g))):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", best_params)
            losses.append(lb.total)
            x = opt.step(x, g)
        if not losses:
            raise TrainingDiverged(f"every sample tangled in epoch {epoch}", best_params)
        curve.append(float(np.mean(losses)))
        times.append(time.perf_counter() - t0)
        if curve[-1] < best:
            best, best_epoch = curve[-1], epoch
            best_params = params.with_vector(x)
            if ckpt is not None:
                best_params.save(ckpt)
        if callback is not None:
            callback(epoch, curve[-1])
    return TrainResult(params.with_vector(x), curve, best_epoch, n_tangled, times)
