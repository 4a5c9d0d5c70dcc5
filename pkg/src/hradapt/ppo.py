"""
Proximal policy optimisation for the vertex and element swarms.

Each iteration rolls out complete episodes until the requested number of
transitions is collected, computes lineage-aware GAE, normalises
advantages per swarm, then runs several epochs of minibatch updates.  A
minibatch is a set of transitions; every agent of a transition
contributes to its swarm's averaged loss.

During the first ``phase1_iters`` iterations refinement flags are drawn
at random and only the vertex-swarm parameters are updated.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .features import ELEMENT_BASE_DIM
from .env import EnvConfig, Episode, gae, step_hr
from .policy import (
    PolicyConfig,
    element_param_names,
    elem_entropy,
    elem_logprob,
    forward,
    init_params,
    vertex_entropy,
    vertex_logprob,
    vertex_param_names,
)

METRIC_COLUMNS = [
    "iteration",
    "phase",
    "transitions",
    "episodes",
    "mean_err_rel",
    "mean_elements",
    "mean_vertex_reward",
    "mean_elem_reward",
    "tangle_rate",
    "loss",
    "grad_norm",
]


@dataclass
class TrainConfig:
    iterations: int = 400
    transitions_per_iter: int = 256
    epochs: int = 5
    minibatch: int = 32
    clip: float = 0.2
    value_coef_r: float = 0.5
    value_coef_h: float = 0.5
    grad_clip: float = 0.5
    lr: float = 3e-4
    ent_v: float = 1e-3
    ent_e: float = 1e-3
    phase1_iters: int = 150
    p_rand: float = 0.25
    seed: int = 0
    checkpoint_every: int = 10
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig(**self.env)
        if isinstance(self.policy, dict):
            self.policy = PolicyConfig(**self.policy)
        if self.iterations < 1 or self.transitions_per_iter < 1 or self.epochs < 1 or self.minibatch < 1:
            raise ValueError("iteration, transition, epoch and minibatch counts must be positive")
        if self.phase1_iters > self.iterations:
            raise ValueError("phase1_iters must not exceed iterations")

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------
# observation normalisation


class RunningStats:
    """Column-wise mean and variance merged batch by batch (Chan/Welford)."""

    def __init__(self, dim, eps=1e-8):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.eps = eps

    def update(self, x):
        x = np.asarray(x, float)
        n = len(x)
        if n == 0:
            return
        bmean = x.mean(axis=0)
        bm2 = ((x - bmean) ** 2).sum(axis=0)
        tot = self.count + n
        delta = bmean - self.mean
        self.mean = self.mean + delta * n / tot
        self.m2 = self.m2 + bm2 + delta**2 * self.count * n / tot
        self.count = tot

    @property
    def var(self):
        v = self.m2 / self.count if self.count > 0 else np.ones_like(self.m2)
        return np.maximum(v, self.eps)

    def normalize(self, x):
        return (np.asarray(x, float) - self.mean) / np.sqrt(self.var)

    def to_dict(self):
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist(), "eps": self.eps}

    @classmethod
    def from_dict(cls, d):
        s = cls(len(d["mean"]), d.get("eps", 1e-8))
        s.count = d["count"]
        s.mean = np.array(d["mean"], float)
        s.m2 = np.array(d["m2"], float)
        return s


class ObsNormalizer:
    def __init__(self, d_v, d_e, eps=1e-8):
        self.vertex = RunningStats(d_v, eps)
        self.elem = RunningStats(d_e, eps)

    def normalize(self, state, update=False):
        if update:
            self.vertex.update(state.vertex_feats)
            self.elem.update(state.elem_feats)
        return self.vertex.normalize(state.vertex_feats), self.elem.normalize(state.elem_feats)

    def to_dict(self):
        return {"vertex": self.vertex.to_dict(), "elem": self.elem.to_dict()}

    @classmethod
    def from_dict(cls, d):
        n = cls(1, 1)
        n.vertex = RunningStats.from_dict(d["vertex"])
        n.elem = RunningStats.from_dict(d["elem"])
        return n


def element_width(kind):
    """Element feature width for a problem kind."""
    return ELEMENT_BASE_DIM + (1 if kind == "poisson" else 2)


def normalize_obs(normalizer, state, update=False):
    return normalizer.normalize(state, update)


# ----------------------------------------------------------------------
# loss


@dataclass(eq=False)
class Sample:
    """One transition prepared for the update."""

    graph: object
    vertex_feats: np.ndarray
    elem_feats: np.ndarray
    vertex_actions: np.ndarray | None
    vertex_logprob: np.ndarray | None
    vertex_adv: np.ndarray | None
    vertex_target: np.ndarray | None
    vertex_value: np.ndarray | None
    elem_actions: np.ndarray | None = None
    elem_logprob: np.ndarray | None = None
    elem_adv: np.ndarray | None = None
    elem_target: np.ndarray | None = None
    elem_value: np.ndarray | None = None


def clipped_policy_loss(newlogp, oldlogp, adv, clip):
    ratio = T.exp(T.sub(newlogp, oldlogp))
    s1 = T.mul(ratio, adv)
    s2 = T.mul(T.clip(ratio, 1.0 - clip, 1.0 + clip), adv)
    return T.neg(T.mean(T.minimum(s1, s2)))


def clipped_value_loss(value, old_value, target, clip):
    un = T.square(T.sub(value, target))
    vc = T.add(T.clip(T.sub(value, old_value), -clip, clip), old_value)
    cl = T.square(T.sub(vc, target))
    return T.mean(T.maximum(un, cl))


def ppo_loss(params, batch, pcfg, tcfg, train_elem=True):
    """Combined swarm loss over a list of :class:`Sample`.

    Returns ``(loss, stats)``.
    """
    vl, vo, va, vv, vvo, vt, vh = [], [], [], [], [], [], []
    el, eo, ea, ev, evo, et, eh = [], [], [], [], [], [], []
    for s in batch:
        has_v = s.vertex_actions is not None
        has_e = train_elem and s.elem_logprob is not None
        if not (has_v or has_e):
            continue
        out = forward(params, s.vertex_feats, s.elem_feats, s.graph, pcfg, need_vertex=has_v, need_elem=has_e)
        if has_v:
            vl.append(vertex_logprob(out, s.graph, s.vertex_actions))
            vo.append(s.vertex_logprob)
            va.append(s.vertex_adv)
            vv.append(out.vertex_value)
            vvo.append(s.vertex_value)
            vt.append(s.vertex_target)
            vh.append(vertex_entropy(out, s.graph))
        if has_e:
            el.append(elem_logprob(out, s.elem_actions))
            eo.append(s.elem_logprob)
            ea.append(s.elem_adv)
            ev.append(out.elem_value)
            evo.append(s.elem_value)
            et.append(s.elem_target)
            eh.append(elem_entropy(out))
    loss = T.Tensor(0.0)
    stats = {}
    if vl:
        lp = clipped_policy_loss(T.concat(vl, 0), np.concatenate(vo), np.concatenate(va), tcfg.clip)
        lv = clipped_value_loss(T.concat(vv, 0), np.concatenate(vvo), np.concatenate(vt), tcfg.clip)
        hv = T.mean(T.concat(vh, 0))
        loss = T.add(loss, T.sub(T.add(lp, T.mul(lv, tcfg.value_coef_r)), T.mul(hv, tcfg.ent_v)))
        stats.update(vertex_pi=float(lp.data), vertex_v=float(lv.data), vertex_ent=float(hv.data))
    if el:
        lp = clipped_policy_loss(T.concat(el, 0), np.concatenate(eo), np.concatenate(ea), tcfg.clip)
        lv = clipped_value_loss(T.concat(ev, 0), np.concatenate(evo), np.concatenate(et), tcfg.clip)
        he = T.mean(T.concat(eh, 0))
        loss = T.add(loss, T.sub(T.add(lp, T.mul(lv, tcfg.value_coef_h)), T.mul(he, tcfg.ent_e)))
        stats.update(elem_pi=float(lp.data), elem_v=float(lv.data), elem_ent=float(he.data))
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    return loss, stats


# ----------------------------------------------------------------------
# rollouts and training


def _normalise(chunks):
    flat = np.concatenate([c for c in chunks if c is not None]) if any(c is not None for c in chunks) else None
    if flat is None or len(flat) == 0:
        return chunks
    mu, sd = flat.mean(), flat.std()
    sd = sd if sd > 1e-8 else 1.0
    return [None if c is None else (c - mu) / sd for c in chunks]


def collect(tasks, params, tcfg, normalizer, rng, phase1):
    """Roll out complete episodes until ``transitions_per_iter`` steps exist."""
    episodes, samples = [], []
    n = 0
    while n < tcfg.transitions_per_iter:
        task = tasks[int(rng.integers(len(tasks)))]
        alpha = tcfg.env.sample_alpha(rng)
        ep = Episode(task, alpha, tcfg.env)
        while not ep.done:
            step_hr(
                ep,
                params,
                tcfg.policy,
                rng,
                training=True,
                normalizer=normalizer,
                update_normalizer=True,
                random_flags=tcfg.p_rand if phase1 else None,
            )
        episodes.append(ep)
        n += len(ep.transitions)
    for ep in episodes:
        ea, et, va, vt = gae(ep.transitions, tcfg.env.gamma_h, tcfg.env.gamma_r, tcfg.env.lam)
        for k, t in enumerate(ep.transitions):
            samples.append(
                Sample(
                    graph=t.graph,
                    vertex_feats=t.vertex_feats,
                    elem_feats=t.elem_feats,
                    vertex_actions=t.vertex_actions,
                    vertex_logprob=t.vertex_logprob,
                    vertex_adv=va[k],
                    vertex_target=vt[k],
                    vertex_value=t.vertex_value,
                    elem_actions=t.elem_actions if t.elem_trained else None,
                    elem_logprob=t.elem_logprob if t.elem_trained else None,
                    elem_adv=ea[k] if t.elem_trained else None,
                    elem_target=et[k] if t.elem_trained else None,
                    elem_value=t.elem_value if t.elem_trained else None,
                )
            )
    va = _normalise([s.vertex_adv for s in samples])
    ea = _normalise([s.elem_adv for s in samples])
    for s, a, b in zip(samples, va, ea):
        s.vertex_adv, s.elem_adv = a, b
    return episodes, samples


def checkpoint_header(tcfg, normalizer, iteration):
    return {
        "policy": tcfg.policy.to_dict(),
        "train": {k: v for k, v in tcfg.to_dict().items() if k not in ("policy",)},
        "normalizer": normalizer.to_dict(),
        "iteration": iteration,
    }


def load_checkpoint(path):
    """Return ``(params, policy_cfg, normalizer, header)``."""
    params, header = T.ParamStore.load(path)
    pcfg = PolicyConfig(**header["policy"])
    norm = ObsNormalizer.from_dict(header["normalizer"])
    return params, pcfg, norm, header


def train(tcfg, tasks, out_dir=None, params=None, normalizer=None, log=None):
    """Train from scratch (or continue ``params``) on ``tasks``.

    Returns ``(params, normalizer, metrics)`` where ``metrics`` is a list of
    per-iteration dicts.  With ``out_dir``, writes ``metrics.csv`` and a
    checkpoint every ``checkpoint_every`` iterations plus ``final.json``.
    """
    rng = np.random.default_rng(tcfg.seed)
    if tasks:
        tcfg.policy.d_e = element_width(tasks[0].instance.kind)
    params = params or init_params(tcfg.policy)
    normalizer = normalizer or ObsNormalizer(tcfg.policy.d_v, tcfg.policy.d_e)
    elem_names = element_param_names(params)
    vert_names = vertex_param_names(params)
    metrics = []
    writer = fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
    try:
        for it in range(tcfg.iterations):
            phase1 = it < tcfg.phase1_iters
            episodes, samples = collect(tasks, params, tcfg, normalizer, rng, phase1)
            names = vert_names if phase1 else vert_names + elem_names
            losses, norms = [], []
            for _ in range(tcfg.epochs):
                order = rng.permutation(len(samples))
                for start in range(0, len(order), tcfg.minibatch):
                    batch = [samples[i] for i in order[start : start + tcfg.minibatch]]
                    params.zero_grad()
                    loss, _ = ppo_loss(params, batch, tcfg.policy, tcfg, train_elem=not phase1)
                    if not loss.requires_grad:
                        continue
                    T.backward(loss)
                    norms.append(T.adam_step(params, tcfg.lr, grad_clip_norm=tcfg.grad_clip, names=names))
                    losses.append(float(loss.data))
            params.zero_grad()
            trs = [t for ep in episodes for t in ep.transitions]
            er = [t.elem_reward.mean() for t in trs if t.elem_reward is not None]
            row = {
                "iteration": it,
                "phase": 1 if phase1 else 2,
                "transitions": len(trs),
                "episodes": len(episodes),
                "mean_err_rel": float(np.mean([ep.error_rel() for ep in episodes])),
                "mean_elements": float(np.mean([ep.mesh.n_elements for ep in episodes])),
                "mean_vertex_reward": float(np.mean([t.vertex_reward.mean() for t in trs])),
                "mean_elem_reward": float(np.mean(er)) if er else 0.0,
                "tangle_rate": float(np.mean([t.tangled for t in trs])),
                "loss": float(np.mean(losses)) if losses else 0.0,
                "grad_norm": float(np.mean(norms)) if norms else 0.0,
            }
            metrics.append(row)
            if writer is not None:
                writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
                fh.flush()
                if (it + 1) % tcfg.checkpoint_every == 0:
                    params.save(os.path.join(out_dir, f"ckpt_{it + 1:04d}.json"), checkpoint_header(tcfg, normalizer, it + 1))
            if log is not None:
                log(row)
        if out_dir is not None:
            params.save(os.path.join(out_dir, "final.json"), checkpoint_header(tcfg, normalizer, tcfg.iterations))
    finally:
        if fh is not None:
            fh.close()
    return params, normalizer, metrics


def save_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
