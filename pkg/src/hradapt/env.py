"""
Adaptation episodes for the two agent swarms.

One step relocates vertices (vertex swarm), optionally refines elements
(element swarm) on the relocated mesh and re-solves.  The last step of an
episode is relocation only.  Vertex rewards measure the local drop of the
squared error indicator, diffused over the vertex graph with a
personalised-PageRank iteration; element rewards measure the drop of the
maximum error from a parent to its worst child, minus a cost per created
element.

Returns and advantages are built per swarm: element credit follows the
refinement lineage (children report to their parent), vertex credit
follows persistent vertex ids.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from dataclasses import field as dc_field

import numpy as np

from . import fem
from .features import build_state
from .mesh import RefinementMaps, detect_tangled, rgb_refine, uniform_refine
from .policy import build_graph, forward, sample_actions


@dataclass
class EnvConfig:
    horizon: int = 4
    ref_depth: int = 3
    beta: float = 0.5
    pagerank_iters: int = 20
    penalty: float = 1.5
    gamma_h: float = 1.0
    gamma_r: float = 0.1
    lam: float = 0.95
    alpha_min: float = 7.0e-5
    alpha_max: float = 2.0e-2

    def sample_alpha(self, rng):
        return float(np.exp(rng.uniform(np.log(self.alpha_min), np.log(self.alpha_max))))


@dataclass(eq=False)
class Task:
    """A problem instance with its coarse mesh and reference solution."""

    instance: fem.ProblemInstance
    initial_mesh: object
    ref: fem.Reference
    initial_field: np.ndarray
    initial_eta_inf: np.ndarray
    initial_eta_2: np.ndarray

    @property
    def initial_total_error(self):
        return float(self.initial_eta_inf.sum())

    @property
    def initial_error_sq(self):
        return float(self.initial_eta_2.sum())

    @classmethod
    def build(cls, instance, initial_mesh, ref_depth=3, ref_mesh=None, ref_field=None):
        if ref_mesh is None:
            ref_mesh = uniform_refine(initial_mesh, ref_depth)
        if ref_field is None:
            ref_field = fem.solve(ref_mesh, instance)
        ref = fem.Reference(ref_mesh, ref_field)
        u0 = fem.solve(initial_mesh, instance)
        inf, two = fem.indicators(initial_mesh, u0, ref)
        # anything at roundoff level counts as zero error
        scale = max(float(np.abs(ref.values).max()), 1e-300) * len(inf)
        if inf.sum() <= 1e-12 * scale:
            raise fem.FEMError("initial mesh has zero error against the reference")
        return cls(instance, initial_mesh, ref, u0, inf, two)


@dataclass(eq=False)
class Transition:
    step: int
    mesh: object
    graph: object
    vertex_feats: np.ndarray
    elem_feats: np.ndarray
    vertex_actions: np.ndarray | None = None
    elem_actions: np.ndarray | None = None
    vertex_logprob: np.ndarray | None = None
    elem_logprob: np.ndarray | None = None
    vertex_value: np.ndarray | None = None
    elem_value: np.ndarray | None = None
    vertex_reward: np.ndarray | None = None
    elem_reward: np.ndarray | None = None
    global_gain: float = 0.0
    maps: RefinementMaps | None = None
    tangled: bool = False
    elem_trained: bool = False


@dataclass(eq=False)
class Episode:
    task: Task
    alpha: float
    config: EnvConfig
    mesh: object = None
    field: np.ndarray = None
    eta_inf: np.ndarray = None
    eta_2: np.ndarray = None
    step_index: int = 0
    transitions: list = dc_field(default_factory=list)
    log: list = dc_field(default_factory=list)

    def __post_init__(self):
        if self.mesh is None:
            self.mesh = self.task.initial_mesh
            self.field = self.task.initial_field
            self.eta_inf = self.task.initial_eta_inf
            self.eta_2 = self.task.initial_eta_2

    @property
    def done(self):
        return self.step_index > self.config.horizon

    @property
    def is_final_step(self):
        return self.step_index == self.config.horizon

    def error_rel(self):
        return float(self.eta_2.sum() / self.task.initial_error_sq)

    def write_log(self, path):
        with open(path, "w") as fh:
            for row in self.log:
                fh.write(json.dumps(row) + "\n")


# ----------------------------------------------------------------------
# rewards


def vertex_error_density(mesh, eta2):
    """Area-weighted mean of ``eta2`` over the elements around each vertex."""
    w = np.repeat(mesh.areas[:, None], 3, axis=1).ravel()
    v = np.repeat((mesh.areas * eta2)[:, None], 3, axis=1).ravel()
    num = np.bincount(mesh.tris.ravel(), weights=v, minlength=mesh.n_vertices)
    den = np.bincount(mesh.tris.ravel(), weights=w, minlength=mesh.n_vertices)
    return num / np.where(den > 0, den, 1.0)


def pagerank_diffuse(delta, adjacency, beta=0.5, iters=20):
    """``r <- (1 - beta) delta + beta D^-1 A r`` from ``r = delta``."""
    deg = np.asarray(adjacency.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    r = np.array(delta, float)
    for _ in range(iters):
        r = (1.0 - beta) * delta + beta * inv * (adjacency @ r)
    return r


def vertex_rewards(mesh_before, eta2_before, mesh_moved, eta2_moved, adjacency, beta=0.5, iters=20):
    """Diffused, sup-normalised drop of the vertex error density.

    ``eta2_*`` are per-element squared indicators on each mesh.
    """
    delta = vertex_error_density(mesh_before, eta2_before) - vertex_error_density(mesh_moved, eta2_moved)
    r = pagerank_diffuse(delta, adjacency, beta, iters)
    top = np.max(np.abs(r)) if len(r) else 0.0
    if top > 0:
        r = r / top
    return np.clip(r, -1.0, 1.0)


def tangling_penalty(mesh_moved, penalty=1.5):
    """``(rolled_back, rewards)``: vertices of inverted elements get ``-penalty``."""
    bad = sorted(detect_tangled(mesh_moved))
    r = np.zeros(mesh_moved.n_vertices)
    if not bad:
        return False, r
    r[np.unique(mesh_moved.tris[bad].ravel())] = -penalty
    return True, r


def element_rewards(eta_inf_moved, eta_inf_next, maps, alpha, initial_total_error):
    """Normalised max-error drop from each parent to its worst child, minus cost."""
    e_par = np.asarray(eta_inf_moved) / initial_total_error
    e_child = np.asarray(eta_inf_next) / initial_total_error
    worst = np.full(maps.n_parents, -np.inf)
    np.maximum.at(worst, maps.child_parent, e_child)
    return (e_par - worst) - alpha * (maps.n_children - 1)


def global_gain(eta2_before, eta2_after):
    before = float(np.sum(eta2_before))
    if before <= 0:
        return 0.0
    return (before - float(np.sum(eta2_after))) / before


# ----------------------------------------------------------------------
# the step


def step_hr(
    episode,
    params=None,
    policy_cfg=None,
    rng=None,
    training=True,
    normalizer=None,
    update_normalizer=False,
    random_flags=None,
    relocate=True,
):
    """Advance ``episode`` by one hr step and return the :class:`Transition`.

    Parameters
    ----------
    training : bool
        Sample actions and compute rewards (needs an extra solve on the
        relocated mesh).  Otherwise mode actions and no rewards.
    random_flags : float, optional
        Refine each element with this probability instead of using the
        element head; the element swarm is then not recorded for training.
    relocate : bool
        If false, vertices stay put (used by baselines and random policies).
    """
    if episode.done:
        raise RuntimeError("episode already finished")
    cfg = episode.config
    task = episode.task
    rng = np.random.default_rng() if rng is None else rng
    n = episode.step_index
    final = episode.is_final_step
    mesh, field = episode.mesh, episode.field
    t0 = time.perf_counter()

    state = build_state(mesh, field, n, episode.alpha, task.instance)
    if normalizer is not None:
        vf, ef = normalizer.normalize(state, update=update_normalizer)
    else:
        vf, ef = state.vertex_feats, state.elem_feats
    graph = build_graph(mesh, state.adjacency)
    tr = Transition(step=n, mesh=mesh, graph=graph, vertex_feats=vf, elem_feats=ef)

    use_elem_head = (not final) and random_flags is None
    coords, flags = mesh.coords, None
    if params is not None and (relocate or use_elem_head):
        out = forward(params, vf, ef, graph, policy_cfg, need_vertex=relocate, need_elem=use_elem_head)
        if training:
            c, f, vlp, elp = sample_actions(out, graph, rng)
        else:
            c = out.vertex_mean.data.copy() if relocate else None
            f = (out.elem_logit.data > 0.0) if use_elem_head else None
            vlp = elp = None
        if relocate:
            coords = c
            tr.vertex_actions, tr.vertex_logprob = c, vlp
            tr.vertex_value = out.vertex_value.data.copy()
        if use_elem_head:
            flags = f
            tr.elem_actions, tr.elem_logprob = f, elp
            tr.elem_value = out.elem_value.data.copy()
            tr.elem_trained = True
    if not final and flags is None:
        p = 0.0 if random_flags is None else random_flags
        flags = rng.random(mesh.n_elements) < p

    # relocation with rollback on tangling
    moved = mesh.with_coords(coords)
    tangled, penalty = tangling_penalty(moved, cfg.penalty)
    if tangled:
        moved = mesh
    tr.tangled = tangled
    field_moved = eta_inf_moved = eta2_moved = None
    if training:
        if tangled or moved is mesh:
            field_moved, eta_inf_moved, eta2_moved = field, episode.eta_inf, episode.eta_2
        else:
            field_moved = fem.solve(moved, task.instance)
            eta_inf_moved, eta2_moved = fem.indicators(moved, field_moved, task.ref)
        if tangled:
            tr.vertex_reward = penalty
            tr.global_gain = 0.0
        else:
            tr.vertex_reward = vertex_rewards(
                mesh, episode.eta_2, moved, eta2_moved, state.adjacency, cfg.beta, cfg.pagerank_iters
            )
            tr.global_gain = global_gain(episode.eta_2, eta2_moved)

    # refinement on the relocated mesh
    if final:
        new_mesh, maps = moved, RefinementMaps.identity(moved.n_elements, moved.n_vertices)
        if field_moved is not None:
            new_field, eta_inf_new, eta2_new = field_moved, eta_inf_moved, eta2_moved
        else:
            new_field = fem.solve(new_mesh, task.instance)
            eta_inf_new, eta2_new = fem.indicators(new_mesh, new_field, task.ref)
    else:
        new_mesh, maps = rgb_refine(moved, flags)
        new_field = fem.solve(new_mesh, task.instance)
        eta_inf_new, eta2_new = fem.indicators(new_mesh, new_field, task.ref)
        if training:
            tr.elem_reward = element_rewards(
                eta_inf_moved, eta_inf_new, maps, episode.alpha, task.initial_total_error
            )
        if tr.elem_actions is None:
            tr.elem_actions = flags
    tr.maps = maps

    disp = float(np.linalg.norm(moved.coords - mesh.coords, axis=1).sum())
    episode.mesh, episode.field = new_mesh, new_field
    episode.eta_inf, episode.eta_2 = eta_inf_new, eta2_new
    episode.step_index += 1
    episode.transitions.append(tr)
    episode.log.append(
        {
            "step": n,
            "elements": int(new_mesh.n_elements),
            "err_rel": episode.error_rel(),
            "displacement": disp,
            "tangled": bool(tangled),
            "time_s": time.perf_counter() - t0,
        }
    )
    return tr


def run_episode(task, alpha, params, policy_cfg, env_cfg, rng=None, training=False, normalizer=None, **kw):
    ep = Episode(task, alpha, env_cfg)
    while not ep.done:
        step_hr(ep, params, policy_cfg, rng, training, normalizer, **kw)
    return ep


# ----------------------------------------------------------------------
# returns and advantages


def _child_sum(maps, child_vals):
    return np.bincount(maps.child_parent, weights=child_vals, minlength=maps.n_parents)


def element_steps(transitions):
    return [t for t in transitions if t.elem_reward is not None]


def local_returns(transitions, gamma_h=1.0, gamma_r=0.1):
    """Undiscounted-by-value local returns per step: ``(elem J list, vertex J list)``."""
    n = len(transitions)
    J_e = [None] * n
    J_v = [None] * n
    nxt_e = nxt_v = None
    for k in range(n - 1, -1, -1):
        t = transitions[k]
        if t.elem_reward is not None:
            carry = _child_sum(t.maps, nxt_e) if nxt_e is not None else 0.0
            J_e[k] = t.elem_reward + gamma_h * carry
            nxt_e = J_e[k]
        else:
            nxt_e = None
        if t.vertex_reward is not None:
            carry = nxt_v[t.maps.vertex_persist] if nxt_v is not None else 0.0
            J_v[k] = t.vertex_reward + gamma_r * carry
            nxt_v = J_v[k]
        else:
            nxt_v = None
    return J_e, J_v


def blend_element(G):
    return 0.5 * G + 0.5 * np.mean(G)


def blend_vertex(G, gain):
    return 0.5 * G + 0.5 * gain


def blend_returns(transitions, gamma_h=1.0, gamma_r=0.1):
    """Local returns mixed with the swarm-wide signal of their step."""
    J_e, J_v = local_returns(transitions, gamma_h, gamma_r)
    out_e = [None if j is None else blend_element(j) for j in J_e]
    out_v = [None if j is None else blend_vertex(j, t.global_gain) for j, t in zip(J_v, transitions)]
    return out_e, out_v


def gae(transitions, gamma_h=1.0, gamma_r=0.1, lam=0.95):
    """Lineage-aware GAE.

    Returns four per-step lists ``(elem_adv, elem_target, vert_adv,
    vert_target)``.  The lambda-return of each agent is blended with its
    swarm-wide term and the value estimate is subtracted afterwards; the
    blended return is the value target.
    """
    n = len(transitions)
    ea, et, va, vt = [None] * n, [None] * n, [None] * n, [None] * n
    nA_e = nV_e = nA_v = nV_v = None
    for k in range(n - 1, -1, -1):
        t = transitions[k]
        if t.elem_reward is not None and t.elem_value is not None:
            V = t.elem_value
            if nA_e is not None:
                boot = _child_sum(t.maps, nV_e)
                carry = _child_sum(t.maps, nA_e)
            else:
                boot = carry = 0.0
            delta = t.elem_reward + gamma_h * boot - V
            A = delta + gamma_h * lam * carry
            Ghat = blend_element(A + V)
            ea[k], et[k] = Ghat - V, Ghat
            nA_e, nV_e = A, V
        else:
            nA_e = nV_e = None
        if t.vertex_reward is not None and t.vertex_value is not None:
            V = t.vertex_value
            if nA_v is not None:
                p = t.maps.vertex_persist
                boot, carry = nV_v[p], nA_v[p]
            else:
                boot = carry = 0.0
            delta = t.vertex_reward + gamma_r * boot - V
            A = delta + gamma_r * lam * carry
            Ghat = blend_vertex(A + V, t.global_gain)
            va[k], vt[k] = Ghat - V, Ghat
            nA_v, nV_v = A, V
        else:
            nA_v = nV_v = None
    return ea, et, va, vt
