"""Graph-diffusion mesh deformer with learned softmax attention.

Each block computes attention weights from the current node features, freezes
them, and integrates ``dZ/dt = (A - I) Z`` with explicit Euler.  Because every
row of ``A`` is a probability vector, a step with ``dt < 1/2`` moves each node
to a convex combination of itself and its neighbours.  Reverse-mode
derivatives are written out by hand in :func:`backward_params`.
"""
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import TangledMeshError, check_untangled, is_tangled

CHECKPOINT_VERSION = 1
SCORE_CLAMP = 30.0
N_INPUTS = 4  # xi_x, xi_y, |H|_F, m


# ---------------------------------------------------------------------------
# parameters


@dataclass
class DeformerParams:
    d_lambda: int
    n_blocks: int
    T: int
    dt: float
    weights: dict = field(default_factory=dict)
    slide_boundary: bool = False

    def __post_init__(self):
        if self.d_lambda < 1:
            raise ValueError("d_lambda must be at least 1")
        if self.n_blocks < 1 or self.T < 1:
            raise ValueError("need at least one block and one step")
        if not 0.0 < self.dt < 0.5:
            raise ValueError(f"dt = {self.dt} outside (0, 1/2): diffusion steps could tangle the mesh")
        self.weights = {k: np.array(v, dtype=float) for k, v in self.weights.items()}
        for k, v in self.weights.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite values in weight {k}")

    @classmethod
    def init(cls, d_lambda=16, n_blocks=4, T=32, dt=0.1, enc_hidden=32, att_hidden=16,
             seed=0, attention_scale=0.0, slide_boundary=False):
        """Random initialisation.

        ``attention_scale = 0`` zeroes the attention output layer so the untrained
        deformer diffuses with uniform neighbour weights.
        """
        if d_lambda < 1 or enc_hidden < 1 or att_hidden < 1:
            raise ValueError("layer widths must be at least 1")
        rng = np.random.default_rng(seed)

        def glorot(n_in, n_out):
            return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), (n_in, n_out))

        d_in = 2 * (2 + d_lambda)
        w = {
            "enc.W1": glorot(N_INPUTS, enc_hidden),
            "enc.b1": np.zeros(enc_hidden),
            "enc.W2": glorot(enc_hidden, d_lambda),
            "enc.b2": np.zeros(d_lambda),
        }
        for b in range(n_blocks):
            w[f"att{b}.W1"] = glorot(d_in, att_hidden)
            w[f"att{b}.b1"] = np.zeros(att_hidden)
            w[f"att{b}.w2"] = attention_scale * rng.normal(0.0, 1.0 / np.sqrt(att_hidden), att_hidden)
            w[f"W{b}"] = glorot(d_lambda, d_lambda)
        return cls(d_lambda, n_blocks, T, dt, w, slide_boundary)

    def names(self):
        return list(self.weights)

    def vector(self):
        return np.concatenate([self.weights[k].ravel() for k in self.names()])

    def with_vector(self, vec):
        vec = np.asarray(vec, dtype=float)
        out, i = {}, 0
        for k in self.names():
            a = self.weights[k]
            out[k] = vec[i:i + a.size].reshape(a.shape)
            i += a.size
        if i != vec.size:
            raise ValueError(f"parameter vector has {vec.size} entries, expected {i}")
        return DeformerParams(self.d_lambda, self.n_blocks, self.T, self.dt, out, self.slide_boundary)

    def to_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "d_lambda": self.d_lambda,
            "n_blocks": self.n_blocks,
            "T": self.T,
            "dt": self.dt,
            "slide_boundary": self.slide_boundary,
            "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                        for k, v in self.weights.items()},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        w = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["weights"].items()}
        return cls(int(d["d_lambda"]), int(d["n_blocks"]), int(d["T"]), float(d["dt"]), w,
                   bool(d.get("slide_boundary", False)))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def grad_vector(params, grads):
    """Flatten a gradient dict in the order of ``params.vector()``."""
    return np.concatenate([grads[k].ravel() for k in params.names()])


# ---------------------------------------------------------------------------
# encoder


def _standardize(channels):
    mu = channels.mean(axis=0)
    sd = channels.std(axis=0)
    out = np.zeros_like(channels)
    ok = sd > 1e-12 * (1.0 + np.abs(mu))
    out[:, ok] = (channels[:, ok] - mu[ok]) / sd[ok]
    return out


def encode_features(mesh0, hess_norm, monitor, params, return_cache=False):
    """Node features ``X = (xi | h(xi, |H|, m))`` with standardized MLP inputs."""
    xi = mesh0.coords
    hn = np.asarray(getattr(hess_norm, "values", hess_norm), dtype=float)
    mv = np.asarray(getattr(monitor, "values", monitor), dtype=float)
    raw = np.column_stack([xi, hn, mv])
    if raw.shape != (mesh0.n_nodes, N_INPUTS):
        raise ValueError(f"feature fields must have one value per node ({mesh0.n_nodes})")
    if not np.all(np.isfinite(raw)):
        raise ValueError("NaN or inf in deformer input features")
    S = _standardize(raw)
    w = params.weights
    hid = np.tanh(S @ w["enc.W1"] + w["enc.b1"])
    h = hid @ w["enc.W2"] + w["enc.b2"]
    X = np.column_stack([xi, h])
    if return_cache:
        return X, {"S": S, "hid": hid}
    return X


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True, eq=False)
class AttentionGraph:
    graph: object
    weights: np.ndarray

    def matrix(self):
        g = self.graph
        n = g.n_nodes
        return sp.csr_matrix((self.weights, g.indices, g.indptr), shape=(n, n))

    def row_sums(self):
        return np.bincount(self.graph.src, self.weights, minlength=self.graph.n_nodes)


def _segment_softmax(s, src, n):
    smax = np.full(n, -np.inf)
    np.maximum.at(smax, src, s)
    e = np.exp(s - smax[src])
    return e / np.bincount(src, e, minlength=n)[src]


def _attention_scores(F, graph, w, b):
    d = F.shape[1]
    W1 = w[f"att{b}.W1"]
    P = F @ W1[:d]
    Q = F @ W1[d:]
    hid = np.tanh(P[graph.src] + Q[graph.dst] + w[f"att{b}.b1"])
    return hid @ w[f"att{b}.w2"], hid


def attention_weights(X, graph, params, b):
    """Softmax over each node's neighbours of the block-``b`` edge scores."""
    s, _ = _attention_scores(X, graph, params.weights, b)
    s = np.clip(s, -SCORE_CLAMP, SCORE_CLAMP)
    return AttentionGraph(graph, _segment_softmax(s, graph.src, graph.n_nodes))


# ---------------------------------------------------------------------------
# boundary-aware diffusion


def diffusion_mask(mesh, slide=False):
    """Per directed edge: 1 where the source node may draw on the target.

    Interior nodes use all neighbours and corners use nothing.  Edge nodes stay
    put unless ``slide``, in which case they only use neighbours on their own
    straight segment (corners included) and so move along it.
    """
    g = mesh.graph
    if not slide:
        return (mesh.tags[g.src] == -1).astype(float)
    ts, td = mesh.tags[g.src], mesh.tags[g.dst]
    nv = len(mesh.domain)
    corner_v = -2 - td
    same_seg = (td == ts) | ((td <= -2) & ((corner_v == ts) | (corner_v == (ts + 1) % nv)))
    return np.where(ts == -1, 1.0, np.where(ts >= 0, same_seg.astype(float), 0.0))


def _restrict(a, mask, src, n):
    am = a * mask
    S = np.bincount(src, am, minlength=n)
    active = S > 0
    Sd = np.where(active, S, 1.0)
    return am / Sd[src], S, active


def _snap(mesh, Z):
    """Project edge nodes exactly onto their segment lines."""
    edge = np.flatnonzero(mesh.tags >= 0)
    if edge.size:
        p0 = mesh.domain[mesh.tags[edge]]
        t = mesh.tangent_dirs[edge]
        Z[edge] = p0 + np.sum((Z[edge] - p0) * t, axis=1)[:, None] * t
    return Z


def _snap_backward(mesh, g):
    edge = np.flatnonzero(mesh.tags >= 0)
    if edge.size:
        t = mesh.tangent_dirs[edge]
        g[edge] = np.sum(g[edge] * t, axis=1)[:, None] * t
    return g


def diffuse_block(Z, A, dt, T, mesh, check=True, slide=False):
    """``T`` explicit Euler steps of ``dZ/dt = (A - I) Z`` with ``A`` frozen.

    ``A`` is restricted at the boundary as in :func:`diffusion_mask`.  Returns the
    final positions and the list of positions entering each step.
    """
    if not 0.0 < dt < 0.5:
        raise ValueError(f"dt = {dt} outside (0, 1/2)")
    g = A.graph
    n = g.n_nodes
    at, _, active = _restrict(A.weights, diffusion_mask(mesh, slide), g.src, n)
    M = sp.csr_matrix((at, g.indices, g.indptr), shape=(n, n))
    act = active.astype(float)[:, None]
    Z = np.array(Z, dtype=float)
    states = []
    for _ in range(T):
        states.append(Z)
        Z = Z + dt * (M @ Z - act * Z)
        if slide:
            Z = _snap(mesh, Z)
    if check:
        bad, tris = is_tangled(mesh.with_coords(Z))
        if bad:
            raise TangledMeshError("diffusion block tangled the mesh; this indicates a bug", tris)
    return Z, states


def max_stable_dt(A, n_iter=50):
    """Step bound ``min(1/2, kappa/2)`` with ``kappa`` the condition number of
    ``M = I - (I - A)/4``, nudged just below 1/2 so it is a valid step.

    The extreme singular values come from power iteration on ``M^T M`` and on
    its inverse (via a sparse LU).
    """
    n = A.graph.n_nodes
    M = (0.75 * sp.identity(n) + 0.25 * A.matrix()).tocsc()
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    smax2 = 0.0
    for _ in range(n_iter):
        w = M.T @ (M @ v)
        smax2 = np.linalg.norm(w)
        v = w / smax2
    lu = spla.splu(M)
    v = rng.standard_normal(n)
    inv2 = 0.0
    for _ in range(n_iter):
        w = lu.solve(lu.solve(v, trans="T"))
        inv2 = np.linalg.norm(w)
        v = w / inv2
    kappa = np.sqrt(smax2 * inv2)
    return float(np.nextafter(min(0.5, kappa / 2.0), 0.0))


# ---------------------------------------------------------------------------
# full deformer


def deform(mesh0, params, hess_norm, monitor):
    """Run all blocks from ``mesh0``.  Returns the adapted mesh and the tape."""
    check_untangled(mesh0)
    w = params.weights
    graph = mesh0.graph
    n = mesh0.n_nodes
    slide = params.slide_boundary
    mask = diffusion_mask(mesh0, slide)
    X0, enc = encode_features(mesh0, hess_norm, monitor, params, return_cache=True)
    Z = mesh0.coords.copy()
    Xl = X0[:, 2:]
    blocks = []
    for b in range(params.n_blocks):
        F = np.column_stack([Z, Xl])
        s_raw, hid = _attention_scores(F, graph, w, b)
        a = _segment_softmax(np.clip(s_raw, -SCORE_CLAMP, SCORE_CLAMP), graph.src, n)
        A = AttentionGraph(graph, a)
        Z_out, states = diffuse_block(Z, A, params.dt, params.T, mesh0, check=False, slide=slide)
        AX = A.matrix() @ Xl
        X_out = np.tanh(AX @ w[f"W{b}"])
        blocks.append({"F": F, "hid": hid, "s_raw": s_raw, "a": a, "states": states,
                       "X": Xl, "AX": AX, "X_out": X_out})
        Z, Xl = Z_out, X_out
    out = mesh0.with_coords(Z)
    bad, tris = is_tangled(out)
    if bad:
        raise TangledMeshError("deformer output is tangled; this indicates a bug", tris)
    tape = {"mesh0": mesh0, "params": params, "mask": mask, "slide": slide, "enc": enc, "blocks": blocks,
            "Z_out": Z, "X_out": Xl}
    return out, tape


def backward_params(tape, gZ, gX=None):
    """Gradient of a scalar loss with respect to every weight, given its
    derivatives with respect to the final positions and hidden features."""
    params = tape["params"]
    mesh0 = tape["mesh0"]
    w = params.weights
    graph = mesh0.graph
    n, src, dst = graph.n_nodes, graph.src, graph.dst
    dt = params.dt
    gZ = np.array(gZ, dtype=float)
    if gZ.shape != tape["Z_out"].shape:
        raise ValueError(f"position gradient has shape {gZ.shape}, expected {tape['Z_out'].shape}")
    gX = np.zeros_like(tape["X_out"]) if gX is None else np.array(gX, dtype=float)
    if gX.shape != tape["X_out"].shape:
        raise ValueError(f"feature gradient has shape {gX.shape}, expected {tape['X_out'].shape}")
    mask = tape["mask"]
    grads = {k: np.zeros_like(v) for k, v in w.items()}

    for b in reversed(range(params.n_blocks)):
        blk = tape["blocks"][b]
        a = blk["a"]
        Amat = sp.csr_matrix((a, graph.indices, graph.indptr), shape=(n, n))

        # hidden update X_out = tanh(A X W)
        gY = gX * (1.0 - blk["X_out"] ** 2)
        grads[f"W{b}"] += blk["AX"].T @ gY
        gAX = gY @ w[f"W{b}"].T
        ga = np.sum(gAX[src] * blk["X"][dst], axis=1)
        gXin = Amat.T @ gAX

        # Euler steps with the boundary-restricted matrix
        at, S, active = _restrict(a, mask, src, n)
        M = sp.csr_matrix((at, graph.indices, graph.indptr), shape=(n, n))
        act = active.astype(float)[:, None]
        gat = np.zeros_like(at)
        g = gZ
        for Zk in reversed(blk["states"]):
            if tape["slide"]:
                g = _snap_backward(mesh0, g)
            gV = dt * g
            gat += np.sum(gV[src] * Zk[dst], axis=1)
            g = g + M.T @ gV - act * gV
        gZin = g
        # undo the renormalisation at restricted rows
        Sd = np.where(active, S, 1.0)
        ga += mask * (gat - np.bincount(src, at * gat, minlength=n)[src]) / Sd[src]

        # softmax and clamp
        gs = a * (ga - np.bincount(src, a * ga, minlength=n)[src])
        gs = np.where(np.abs(blk["s_raw"]) < SCORE_CLAMP, gs, 0.0)

        # attention MLP
        hid = blk["hid"]
        grads[f"att{b}.w2"] += hid.T @ gs
        gpre = np.outer(gs, w[f"att{b}.w2"]) * (1.0 - hid ** 2)
        grads[f"att{b}.b1"] += gpre.sum(axis=0)
        gP = np.zeros((n, gpre.shape[1]))
        gQ = np.zeros((n, gpre.shape[1]))
        np.add.at(gP, src, gpre)
        np.add.at(gQ, dst, gpre)
        F = blk["F"]
        d = F.shape[1]
        W1 = w[f"att{b}.W1"]
        grads[f"att{b}.W1"][:d] += F.T @ gP
        grads[f"att{b}.W1"][d:] += F.T @ gQ
        gF = gP @ W1[:d].T + gQ @ W1[d:].T

        gZ = gZin + gF[:, :2]
        gX = gXin + gF[:, 2:]

    # encoder: X_lambda^0 = tanh(S W1 + b1) W2 + b2
    enc = tape["enc"]
    grads["enc.W2"] += enc["hid"].T @ gX
    grads["enc.b2"] += gX.sum(axis=0)
    gh = (gX @ w["enc.W2"].T) * (1.0 - enc["hid"] ** 2)
    grads["enc.W1"] += enc["S"].T @ gh
    grads["enc.b1"] += gh.sum(axis=0)
    return grads
