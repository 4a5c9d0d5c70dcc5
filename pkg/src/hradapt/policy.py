"""
Actor-critic network over the mesh hypergraph.

Two backbones with separate weights (one feeding the element heads, one
feeding the vertex heads) embed vertex and element features and run
``L`` rounds of vertex -> element -> vertex message passing.  Element
agents get a Bernoulli refinement logit and a value.  Vertex agents get
a Gaussian whose mean is produced by attention-weighted diffusion of the
vertex coordinates, a log-std and a value.

Boundary handling: corners attend only to themselves and edge vertices
only to boundary vertices of their own component, so every diffusion
step keeps corners fixed and edge vertices on their supporting line.
Sampling happens in the matching reduced space (2-D interior, 1-D
tangential for edge vertices, nothing for corners).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .features import ELEMENT_BASE_DIM, VERTEX_DIM
from .mesh import CORNER, EDGE, INTERIOR


@dataclass
class PolicyConfig:
    d_v: int = VERTEX_DIM
    d_e: int = ELEMENT_BASE_DIM + 1
    latent: int = 64
    layers: int = 4
    hidden: int = 64
    att_dim: int = 16
    stages: int = 4
    euler_steps: int = 2
    dtau: float = 0.1
    log_std_min: float = -5.0
    log_std_max: float = 1.0
    log_std_init: float = -3.0
    logit_init: float = -1.5
    att_gain: float = 0.25
    seed: int = 0

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------
# parameters


def _glorot(rng, n_in, n_out, gain=1.0):
    lim = gain * math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def _mlp_params(store, rng, prefix, sizes, out_gain=0.01, out_bias=0.0):
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        store.add(f"{prefix}/W{k}", _glorot(rng, a, b, out_gain if last else 1.0))
        store.add(f"{prefix}/b{k}", np.full((1, b), out_bias if last else 0.0))


def _backbone_params(store, rng, prefix, cfg):
    D = cfg.latent
    store.add(f"{prefix}/embed_v", _glorot(rng, cfg.d_v, D))
    store.add(f"{prefix}/embed_e", _glorot(rng, cfg.d_e, D))
    for layer in range(cfg.layers):
        store.add(f"{prefix}/l{layer}/v2e", _glorot(rng, D, D))
        store.add(f"{prefix}/l{layer}/pool", _glorot(rng, 2 * D, D))
        store.add(f"{prefix}/l{layer}/e2v", _glorot(rng, D, D))


def init_params(cfg=None):
    """Fresh :class:`~hradapt.tensor.ParamStore` for ``cfg``."""
    cfg = cfg or PolicyConfig()
    rng = np.random.default_rng(cfg.seed)
    store = T.ParamStore()
    D, H = cfg.latent, cfg.hidden
    _backbone_params(store, rng, "elem", cfg)
    _backbone_params(store, rng, "vert", cfg)
    for s in range(cfg.stages):
        # small scorer gains start the diffusion close to uniform smoothing;
        # sharply peaked attention drags vertices across thin elements
        store.add(f"att/s{s}/wq", _glorot(rng, D, cfg.att_dim, cfg.att_gain))
        store.add(f"att/s{s}/wk", _glorot(rng, D, cfg.att_dim, cfg.att_gain))
        store.add(f"att/s{s}/w", _glorot(rng, D, 2) * 0.1)
        store.add(f"att/s{s}/b", np.zeros((1, 1)))
    _mlp_params(store, rng, "elem/pi", [D, H, H, 1], out_bias=cfg.logit_init)
    _mlp_params(store, rng, "elem/value", [D, H, H, 1])
    _mlp_params(store, rng, "vert/std", [D, H, H, 2], out_bias=cfg.log_std_init)
    _mlp_params(store, rng, "vert/value", [D, H, H, 1])
    return store


def element_param_names(store):
    """Parameters that only influence the element swarm."""
    return [k for k in store.names() if k.startswith("elem/")]


def vertex_param_names(store):
    return [k for k in store.names() if not k.startswith("elem/")]


# ----------------------------------------------------------------------
# graph structure used by the forward pass


@dataclass(eq=False)
class Graph:
    n_v: int
    n_e: int
    inc_v: np.ndarray  # vertex id of each (element, corner) incidence
    inc_e: np.ndarray  # element id of each incidence
    pair_i: np.ndarray  # attention rows
    pair_j: np.ndarray  # attention columns
    coords: np.ndarray
    vclass: np.ndarray
    tangent: np.ndarray  # unit boundary direction for edge vertices, else 0
    proj0: np.ndarray  # rows mapping a displacement to reduced coordinate 0
    proj1: np.ndarray  # ... and reduced coordinate 1
    mask: np.ndarray  # (N_v, 2) which reduced coordinates are random
    log_h: np.ndarray  # log of the mean incident edge length, shape (N_v, 1)


def _attention_pairs(mesh, adjacency):
    """Self loops plus neighbours allowed by the boundary mask."""
    nv = mesh.n_vertices
    adj = adjacency.tocoo()
    i = np.concatenate([np.arange(nv), adj.row])
    j = np.concatenate([np.arange(nv), adj.col])
    ci, cj = mesh.vclass[i], mesh.vclass[j]
    keep = (i == j) | (ci == INTERIOR)
    edge_rows = (ci == EDGE) & (i != j)
    comp = mesh.vcomp[i]
    same = edge_rows & (cj == EDGE) & (mesh.vcomp[j] == comp)
    corner_nb = edge_rows & (cj == CORNER)
    if mesh.boundary is not None and np.any(corner_nb):
        idx = np.flatnonzero(corner_nb)
        d = mesh.boundary.segment_distances(mesh.coords[j[idx]])
        on = d[np.arange(len(idx)), comp[idx]] <= 1e-10
        corner_ok = np.zeros_like(corner_nb)
        corner_ok[idx[on]] = True
    else:
        corner_ok = np.zeros_like(corner_nb)
    keep |= same | corner_ok
    i, j = i[keep], j[keep]
    order = np.lexsort((j, i))
    return i[order], j[order]


def build_graph(mesh, adjacency=None):
    if adjacency is None:
        from .features import build_structure

        _, adjacency, _ = build_structure(mesh)
    nv, ne = mesh.n_vertices, mesh.n_elements
    pair_i, pair_j = _attention_pairs(mesh, adjacency)
    tangent = np.zeros((nv, 2))
    is_edge = mesh.vclass == EDGE
    if mesh.boundary is not None and np.any(is_edge):
        tangent[is_edge] = mesh.boundary.tangents[mesh.vcomp[is_edge]]
    proj0 = np.zeros((nv, 2))
    proj1 = np.zeros((nv, 2))
    mask = np.zeros((nv, 2))
    inner = mesh.vclass == INTERIOR
    proj0[inner, 0] = 1.0
    proj1[inner, 1] = 1.0
    mask[inner] = 1.0
    proj0[is_edge] = tangent[is_edge]
    mask[is_edge, 0] = 1.0
    lens = mesh.edge_lengths
    tot = np.bincount(mesh.tris.ravel(), weights=np.repeat(lens.mean(axis=1), 3), minlength=nv)
    cnt = np.bincount(mesh.tris.ravel(), minlength=nv)
    h = tot / np.maximum(cnt, 1)
    return Graph(
        n_v=nv,
        n_e=ne,
        inc_v=mesh.tris.ravel(),
        inc_e=np.repeat(np.arange(ne), 3),
        pair_i=pair_i,
        pair_j=pair_j,
        coords=mesh.coords.copy(),
        vclass=mesh.vclass.copy(),
        tangent=tangent,
        proj0=proj0,
        proj1=proj1,
        mask=mask,
        log_h=np.log(np.maximum(h, 1e-300))[:, None],
    )


# ----------------------------------------------------------------------
# layers


def hconv_layer(X, E, graph, W_v2e, W_pool, W_e2v):
    """One vertex -> element -> vertex message-passing round.

    ``Z = relu(mean_{v in K} X_v W_v2e)``, ``E' = [Z | E] W_pool`` and
    ``X' = relu(mean_{K ni v} E'_K W_e2v)``.
    """
    XW = T.matmul(X, W_v2e)
    Z = T.relu(T.segment_mean(T.gather(XW, graph.inc_v), graph.inc_e, graph.n_e))
    Et = T.matmul(T.concat([Z, E], axis=1), W_pool)
    EW = T.matmul(Et, W_e2v)
    Xn = T.relu(T.segment_mean(T.gather(EW, graph.inc_e), graph.inc_v, graph.n_v))
    return Xn, Et


def _mlp(params, prefix, x, n_layers=3):
    h = x
    for k in range(n_layers):
        h = T.add(T.matmul(h, params[f"{prefix}/W{k}"]), params[f"{prefix}/b{k}"])
        if k < n_layers - 1:
            h = T.tanh(h)
    return h


def _backbone(params, prefix, vfeat, efeat, graph, n_layers):
    X = T.matmul(vfeat, params[f"{prefix}/embed_v"])
    E = T.matmul(efeat, params[f"{prefix}/embed_e"])
    for layer in range(n_layers):
        X, E = hconv_layer(
            X,
            E,
            graph,
            params[f"{prefix}/l{layer}/v2e"],
            params[f"{prefix}/l{layer}/pool"],
            params[f"{prefix}/l{layer}/e2v"],
        )
    return X, E


def attention_weights(params, stage, X, graph):
    """Row-normalised attention over ``(pair_i, pair_j)`` for one stage.

    The score of pair ``(i, j)`` is ``q_i . k_j / sqrt(d) + w . [h_i | h_j] + b``.
    """
    q = T.matmul(X, params[f"att/s{stage}/wq"])
    k = T.matmul(X, params[f"att/s{stage}/wk"])
    lin = T.matmul(X, params[f"att/s{stage}/w"])
    d = q.shape[1]
    bil = T.sum(T.mul(T.gather(q, graph.pair_i), T.gather(k, graph.pair_j)), axis=1)
    lin_i = T.reshape(T.gather(lin, graph.pair_i)[:, 0], (-1,))
    lin_j = T.reshape(T.gather(lin, graph.pair_j)[:, 1], (-1,))
    b = T.reshape(params[f"att/s{stage}/b"], (1,))
    score = T.add(T.add(T.add(T.mul(bil, 1.0 / math.sqrt(d)), lin_i), lin_j), b)
    return T.segment_softmax(score, graph.pair_i, graph.n_v)


def attention_matrix(params, stage, X, graph):
    """Dense row-stochastic matrix of one stage (for inspection and tests)."""
    a = attention_weights(params, stage, T.as_tensor(X), graph).data
    out = np.zeros((graph.n_v, graph.n_v))
    out[graph.pair_i, graph.pair_j] = a
    return out


def diffusion_step(Z, a, graph, dtau):
    """``Z + dtau (A Z - Z)`` with sparse attention weights ``a``."""
    msg = T.mul(T.gather(Z, graph.pair_j), T.reshape(a, (-1, 1)))
    AZ = T.segment_sum(msg, graph.pair_i, graph.n_v)
    return T.add(Z, T.mul(T.sub(AZ, Z), dtau))


def diffformer(params, X, graph, cfg):
    """Attention-driven diffusion of the vertex coordinates."""
    Z = T.Tensor(graph.coords)
    for s in range(cfg.stages):
        a = attention_weights(params, s, X, graph)
        for _ in range(cfg.euler_steps):
            Z = diffusion_step(Z, a, graph, cfg.dtau)
    return Z


# ----------------------------------------------------------------------
# forward pass and actions


@dataclass(eq=False)
class PolicyOutput:
    vertex_mean: T.Tensor  # (N_v, 2)
    vertex_log_std: T.Tensor  # (N_v, 2), meaningful columns given by graph.mask
    elem_logit: T.Tensor  # (N_e,)
    vertex_value: T.Tensor  # (N_v,)
    elem_value: T.Tensor  # (N_e,)


def forward(params, vertex_feats, elem_feats, graph, cfg, need_vertex=True, need_elem=True):
    """Run both backbones and all heads.

    ``need_vertex`` / ``need_elem`` skip a path entirely (its outputs are
    ``None``); used when only one swarm is acting.
    """
    vf, ef = T.as_tensor(vertex_feats), T.as_tensor(elem_feats)
    out = dict(vertex_mean=None, vertex_log_std=None, elem_logit=None, vertex_value=None, elem_value=None)
    if need_elem:
        _, Ee = _backbone(params, "elem", vf, ef, graph, cfg.layers)
        out["elem_logit"] = T.reshape(_mlp(params, "elem/pi", Ee), (-1,))
        out["elem_value"] = T.reshape(_mlp(params, "elem/value", Ee), (-1,))
    if need_vertex:
        Xv, _ = _backbone(params, "vert", vf, ef, graph, cfg.layers)
        raw = T.clip(_mlp(params, "vert/std", Xv), cfg.log_std_min, cfg.log_std_max)
        out["vertex_log_std"] = T.add(raw, graph.log_h)
        out["vertex_value"] = T.reshape(_mlp(params, "vert/value", Xv), (-1,))
        out["vertex_mean"] = diffformer(params, Xv, graph, cfg)
    for k, v in out.items():
        if v is not None and not np.all(np.isfinite(v.data)):
            raise FloatingPointError(f"non-finite activations in {k}")
    return PolicyOutput(**out)


def vertex_logprob(out, graph, coords):
    """Log-density of absolute target ``coords`` in the reduced action space."""
    dev = T.sub(T.Tensor(coords), out.vertex_mean)
    d0 = T.sum(T.mul(dev, graph.proj0), axis=1, keepdims=True)
    d1 = T.sum(T.mul(dev, graph.proj1), axis=1, keepdims=True)
    red = T.concat([d0, d1], axis=1)
    return T.gaussian_logprob(red, np.zeros_like(graph.mask), out.vertex_log_std, graph.mask)


def elem_logprob(out, flags):
    return T.bernoulli_logprob(np.asarray(flags, float), out.elem_logit)


def vertex_entropy(out, graph):
    return T.gaussian_entropy(out.vertex_log_std, graph.mask)


def elem_entropy(out):
    return T.bernoulli_entropy(out.elem_logit)


def sample_actions(out, graph, rng):
    """Sample target coordinates and refinement flags.

    Returns ``(coords, flags, vertex_logp, elem_logp)`` as numpy arrays;
    either half is ``None`` when the corresponding head was not run.
    """
    coords = vlogp = flags = elogp = None
    if out.vertex_mean is not None:
        mean = out.vertex_mean.data
        std = np.exp(out.vertex_log_std.data)
        eps = rng.standard_normal((graph.n_v, 2))
        coords = mean.copy()
        inner = graph.vclass == INTERIOR
        coords[inner] += std[inner] * eps[inner]
        edge = graph.vclass == EDGE
        coords[edge] += (std[edge, 0] * eps[edge, 0])[:, None] * graph.tangent[edge]
        vlogp = vertex_logprob(out, graph, coords).data
    if out.elem_logit is not None:
        p = T._sigmoid(out.elem_logit.data)
        flags = rng.random(graph.n_e) < p
        elogp = elem_logprob(out, flags).data
    return coords, flags, vlogp, elogp


def inference_act(params, vertex_feats, elem_feats, graph, cfg, refine=True):
    """Mode actions: mean coordinates and flags where ``sigmoid(logit) > 0.5``."""
    out = forward(params, vertex_feats, elem_feats, graph, cfg, need_elem=refine)
    coords = out.vertex_mean.data.copy()
    flags = (out.elem_logit.data > 0.0) if refine else None
    return coords, flags
