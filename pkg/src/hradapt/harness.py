"""
Experiment orchestration: datasets, training, evaluation sweeps and
rendering.

Directory layout under ``out_dir``::

    dataset/train/0000.json   problem instance
    dataset/train/0000.mesh   coarse mesh
    dataset/train/0000_ref.mesh, 0000_ref.field
    dataset/eval/...
    train/metrics.csv, ckpt_0010.json, ..., final.json
    eval/rows.csv, eval/pareto.csv
"""
from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fem
from .baselines import HeuristicConfig, run_heuristic
from .domains import generate_domain
from .env import EnvConfig, Task, run_episode
from .mesh import aspect_ratios, detect_tangled, load_mesh, save_mesh, uniform_refine
from .ppo import TrainConfig, element_width, load_checkpoint, train

CSV_HEADER = ["method", "alpha_or_theta", "elements", "err_rel", "time_s", "displacement"]
SEED_STRIDE = 100_000
EVAL_OFFSET = 50_000
THREADS_ENV = "HRADAPT_THREADS"


@dataclass
class ExperimentConfig:
    pde: str = "poisson"
    domain: str = ""
    train_count: int = 50
    eval_count: int = 10
    ref_depth: int = 3
    horizon: int = 4
    target_elements: int = 30
    alpha_count: int = 20
    alpha_min: float = 7.0e-5
    alpha_max: float = 2.0e-2
    theta_count: int = 100
    theta_min: float = 0.0
    theta_max: float = 1.0
    heuristic_steps: int = 4
    seed: int = 0
    out_dir: str = "runs/default"
    record_time: bool = True
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.domain:
            self.domain = "l_shape" if self.pde == "poisson" else "convex_polygon"
        if self.train_count < 1 or self.eval_count < 1:
            raise ValueError("train_count and eval_count must be at least 1")
        if self.train_count > EVAL_OFFSET or self.eval_count > EVAL_OFFSET:
            raise ValueError(f"at most {EVAL_OFFSET} instances per split")
        if not (0 < self.alpha_min < self.alpha_max):
            raise ValueError("alpha bounds must be positive and ordered")
        if not (0 <= self.theta_min <= self.theta_max <= 1):
            raise ValueError("theta bounds must be ordered within [0, 1]")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self):
        return asdict(self)

    def alphas(self):
        return np.geomspace(self.alpha_min, self.alpha_max, self.alpha_count)

    def thetas(self):
        return np.linspace(self.theta_min, self.theta_max, self.theta_count)

    def env_config(self):
        return EnvConfig(
            horizon=self.horizon, ref_depth=self.ref_depth, alpha_min=self.alpha_min, alpha_max=self.alpha_max
        )

    def train_config(self):
        kw = dict(self.train)
        kw.setdefault("seed", self.seed)
        tc = TrainConfig(**kw)
        env = asdict(tc.env)
        env.update(asdict(self.env_config()))
        tc.env = EnvConfig(**env)
        tc.policy.d_e = element_width(self.pde)
        return tc

    def split_dir(self, split):
        return os.path.join(self.out_dir, "dataset", split)


# ----------------------------------------------------------------------
# dataset


def instance_seed(cfg, split, i):
    return cfg.seed * SEED_STRIDE + (EVAL_OFFSET if split == "eval" else 0) + i


def make_instance(cfg, seed):
    """Coarse mesh and PDE parameters for one seed."""
    mesh = generate_domain(cfg.domain, cfg.target_elements, seed)
    inst = fem.sample_instance(cfg.pde, mesh.boundary, seed, domain=cfg.domain)
    return inst, mesh


def gen_dataset(cfg):
    """Write all instances of both splits; returns the list of written base paths."""
    written = []
    for split, count in (("train", cfg.train_count), ("eval", cfg.eval_count)):
        d = cfg.split_dir(split)
        os.makedirs(d, exist_ok=True)
        for i in range(count):
            inst, mesh = make_instance(cfg, instance_seed(cfg, split, i))
            ref_mesh = uniform_refine(mesh, cfg.ref_depth)
            ref_field = fem.solve(ref_mesh, inst)
            base = os.path.join(d, f"{i:04d}")
            with open(base + ".json", "w") as fh:
                fh.write(inst.to_json())
            save_mesh(mesh, base + ".mesh")
            save_mesh(ref_mesh, base + "_ref.mesh")
            fem.save_field(ref_field, base + "_ref.field")
            written.append(base)
    return written


def load_task(base, ref_depth=None):
    for ext in (".json", ".mesh", "_ref.mesh", "_ref.field"):
        if not os.path.exists(base + ext):
            raise FileNotFoundError(f"missing dataset file {base + ext}")
    with open(base + ".json") as fh:
        inst = fem.ProblemInstance.from_json(fh.read())
    mesh = load_mesh(base + ".mesh")
    ref_mesh = load_mesh(base + "_ref.mesh")
    ref_field = fem.load_field(base + "_ref.field")
    return Task.build(inst, mesh, ref_mesh=ref_mesh, ref_field=ref_field)


def load_tasks(cfg, split):
    d = cfg.split_dir(split)
    count = cfg.train_count if split == "train" else cfg.eval_count
    return [load_task(os.path.join(d, f"{i:04d}")) for i in range(count)]


# ----------------------------------------------------------------------
# training and evaluation


def cmd_train(cfg, log=None):
    tasks = load_tasks(cfg, "train")
    tc = cfg.train_config()
    out = os.path.join(cfg.out_dir, "train")
    params, norm, metrics = train(tc, tasks, out_dir=out, log=log)
    return os.path.join(out, "final.json"), metrics


def _map(fn, items):
    threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate_learned(params, pcfg, normalizer, tasks, alphas, env_cfg, record_time=True):
    """Mode-action episodes for each task and penalty; returns CSV rows."""

    def one(job):
        ti, a = job
        t0 = time.perf_counter()
        ep = run_episode(tasks[ti], float(a), params, pcfg, env_cfg, training=False, normalizer=normalizer)
        dt = time.perf_counter() - t0 if record_time else 0.0
        disp = float(np.sum([r["displacement"] for r in ep.log]))
        return ("learned", float(a), ep.mesh.n_elements, ep.error_rel(), dt, disp)

    jobs = [(ti, a) for a in alphas for ti in range(len(tasks))]
    return _map(one, jobs)


def evaluate_heuristics(tasks, cfg, methods=("uniform", "oracle", "zz")):
    """Uniform refinement levels plus the theta sweeps of the marking heuristics."""
    jobs = []
    for ti in range(len(tasks)):
        if "uniform" in methods:
            jobs.append(("uniform", None, ti))
        for m in ("oracle", "zz"):
            if m in methods:
                jobs.extend((m, float(th), ti) for th in cfg.thetas())

    def one(job):
        method, theta, ti = job
        task = tasks[ti]
        t0 = time.perf_counter()
        rows = []
        if method == "uniform":
            hc = HeuristicConfig("uniform", steps=max(cfg.ref_depth, 1))
            tr = run_heuristic(hc, task.instance, task.initial_mesh, task.ref)
            for k, row in enumerate(tr.log):
                rows.append(("uniform", float(k), row["elements"], row["err_rel"], 0.0, 0.0))
            return rows
        hc = HeuristicConfig(method, theta=theta, steps=cfg.heuristic_steps)
        tr = run_heuristic(hc, task.instance, task.initial_mesh, task.ref)
        dt = time.perf_counter() - t0 if cfg.record_time else 0.0
        last = tr.log[-1]
        return [(method, theta, last["elements"], last["err_rel"], dt, 0.0)]

    out = []
    for rows in _map(one, jobs):
        out.extend(rows)
    return out


def write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r[0], f"{r[1]:.17g}", int(r[2]), f"{r[3]:.17g}", f"{r[4]:.17g}", f"{r[5]:.17g}"])


def read_rows(path):
    with open(path) as fh:
        rd = csv.reader(fh)
        head = next(rd)
        if head != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {head}")
        return [(r[0], float(r[1]), int(r[2]), float(r[3]), float(r[4]), float(r[5])) for r in rd]


def aggregate(rows):
    """Mean and population std per ``(method, alpha_or_theta)``, in first-seen order."""
    groups = {}
    for r in rows:
        groups.setdefault((r[0], r[1]), []).append(r)
    out = []
    for (method, key), rs in groups.items():
        a = np.array([r[2:] for r in rs], float)
        mean, std = a.mean(axis=0), a.std(axis=0)
        out.append(
            {
                "method": method,
                "alpha_or_theta": key,
                "elements": mean[0],
                "err_rel": mean[1],
                "time_s": mean[2],
                "displacement": mean[3],
                "elements_std": std[0],
                "err_rel_std": std[1],
                "n": len(rs),
            }
        )
    return out


def write_pareto(agg, path):
    cols = CSV_HEADER + ["elements_std", "err_rel_std", "n"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for g in agg:
            w.writerow([g["method"]] + [f"{g[c]:.17g}" for c in cols[1:-1]] + [g["n"]])


def cmd_eval(checkpoint, cfg, methods=("learned", "uniform", "oracle", "zz")):
    """Evaluate a checkpoint and the baselines on the eval split."""
    tasks = load_tasks(cfg, "eval")
    rows = []
    if "learned" in methods:
        if checkpoint is None or not os.path.exists(checkpoint):
            raise FileNotFoundError(f"missing checkpoint {checkpoint}")
        params, pcfg, norm, _ = load_checkpoint(checkpoint)
        rows += evaluate_learned(params, pcfg, norm, tasks, cfg.alphas(), cfg.env_config(), cfg.record_time)
    rows += evaluate_heuristics(tasks, cfg, [m for m in methods if m != "learned"])
    d = os.path.join(cfg.out_dir, "eval")
    os.makedirs(d, exist_ok=True)
    write_rows(rows, os.path.join(d, "rows.csv"))
    write_pareto(aggregate(rows), os.path.join(d, "pareto.csv"))
    return os.path.join(d, "pareto.csv"), rows


# ----------------------------------------------------------------------
# rendering


def _ramp(t):
    """Blue -> white -> red colour for ``t`` in [0, 1]."""
    t = float(np.clip(t, 0.0, 1.0))
    if t < 0.5:
        s = t / 0.5
        rgb = (int(59 + s * 196), int(76 + s * 179), int(192 + s * 63))
    else:
        s = (t - 0.5) / 0.5
        rgb = (int(255 - s * 75), int(255 - s * 251), int(255 - s * 217))
    return "#%02x%02x%02x" % rgb


def render_svg(mesh, field=None, quality=False, size=600):
    """SVG drawing of ``mesh`` with optional field or aspect-ratio fill.

    Inverted elements are outlined and filled in magenta.
    """
    lo = mesh.coords.min(axis=0)
    span = float(max(np.ptp(mesh.coords, axis=0).max(), 1e-12))
    pad = 10
    scale = (size - 2 * pad) / span

    def xy(p):
        return pad + (p[0] - lo[0]) * scale, size - pad - (p[1] - lo[1]) * scale

    fills = ["#ffffff"] * mesh.n_elements
    if field is not None:
        v = np.asarray(field, float)[mesh.tris].mean(axis=1)
        rng = np.ptp(v)
        t = (v - v.min()) / rng if rng > 0 else np.zeros_like(v)
        fills = [_ramp(x) for x in t]
    elif quality:
        ar = np.clip((np.log(aspect_ratios(mesh)) / np.log(10.0)), 0, 1)
        fills = [_ramp(x) for x in ar]
    bad = detect_tangled(mesh)
    buf = io.StringIO()
    buf.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n')
    for k, tri in enumerate(mesh.tris):
        pts = " ".join("%.3f,%.3f" % xy(mesh.coords[i]) for i in tri)
        if k in bad:
            buf.write(f'<polygon points="{pts}" fill="#ff00ff" stroke="#ff00ff" stroke-width="1.5"/>\n')
        else:
            buf.write(f'<polygon points="{pts}" fill="{fills[k]}" stroke="#222222" stroke-width="0.5"/>\n')
    buf.write("</svg>\n")
    return buf.getvalue()


def cmd_render(mesh_path, out_path, field_path=None, quality=False):
    mesh = load_mesh(mesh_path)
    field_vals = fem.load_field(field_path) if field_path else None
    if field_vals is not None and len(field_vals) != mesh.n_vertices:
        raise ValueError("field length does not match the mesh")
    svg = render_svg(mesh, field_vals, quality)
    with open(out_path, "w") as fh:
        fh.write(svg)
    return out_path


# ----------------------------------------------------------------------
# quick invariant checks


def run_invariant_checks(n=20, seed=0):
    """Randomised spot checks of the core invariants; returns ``[(name, ok, detail)]``."""
    from . import tensor as T
    from .features import build_structure
    from .mesh import rgb_refine
    from .policy import PolicyConfig, build_graph, forward, init_params

    rng = np.random.default_rng(seed)
    results = []

    conform = True
    area = 0.0
    for k in range(n):
        m = generate_domain(("unit_square", "l_shape", "convex_polygon")[k % 3], 20, int(rng.integers(1 << 30)))
        new, maps = rgb_refine(m, rng.random(m.n_elements) < 0.4)
        conform &= new.is_conforming()
        child_area = np.bincount(maps.child_parent, weights=new.areas, minlength=m.n_elements)
        area = max(area, float(np.max(np.abs(child_area - m.areas) / m.areas)))
    results.append(("rgb_conformity", bool(conform and area < 1e-12), f"max area rel err {area:.2e}"))

    tangles = 0
    fixed = True
    online = 0.0
    for k in range(n):
        m = generate_domain(("l_shape", "convex_polygon")[k % 2], 20, int(rng.integers(1 << 30)))
        m, _ = rgb_refine(m, rng.random(m.n_elements) < 0.3)
        _, A, _ = build_structure(m)
        g = build_graph(m, A)
        pcfg = PolicyConfig(d_e=12, seed=int(rng.integers(1 << 30)))
        params = init_params(pcfg)
        vf = rng.standard_normal((m.n_vertices, pcfg.d_v))
        ef = rng.standard_normal((m.n_elements, pcfg.d_e))
        mean = forward(params, vf, ef, g, pcfg, need_elem=False).vertex_mean.data
        tangles += len(detect_tangled(m.with_coords(mean)))
        c = m.vclass == 2
        fixed &= bool(np.array_equal(mean[c], m.coords[c]))
        e = m.vclass == 1
        if np.any(e):
            nrm = np.stack([-m.boundary.tangents[:, 1], m.boundary.tangents[:, 0]], 1)
            off = np.abs(np.sum((mean[e] - m.boundary.corners[m.vcomp[e]]) * nrm[m.vcomp[e]], axis=1))
            online = max(online, float(off.max()))
    results.append(("diffformer_non_tangling", tangles == 0, f"{tangles} tangled elements"))
    results.append(("corners_fixed", fixed, ""))
    results.append(("edge_vertices_on_line", online <= 1e-12, f"max offset {online:.2e}"))

    worst = 0.0
    for _ in range(n):
        x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def f():
            return T.sum(T.tanh(T.matmul(x, w)) * T.sigmoid(T.matmul(x, w)))

        loss = f()
        T.backward(loss)
        g = x.grad.copy()
        x.grad = w.grad = None
        num = np.zeros_like(x.data)
        for idx in np.ndindex(x.shape):
            old = x.data[idx]
            x.data[idx] = old + 1e-5
            fp = float(f().data)
            x.data[idx] = old - 1e-5
            fm = float(f().data)
            x.data[idx] = old
            num[idx] = (fp - fm) / 2e-5
        worst = max(worst, float(np.max(np.abs(num - g)) / max(np.max(np.abs(num)), 1e-12)))
    results.append(("autodiff_finite_difference", worst < 1e-4, f"max rel err {worst:.2e}"))
    return results


# ----------------------------------------------------------------------
# matched random baseline


def _matched_flags(mesh, target, rng):
    """Random flags whose refined element count is closest to ``target``.

    Elements are flagged along one random permutation; the refined count
    grows monotonically with the prefix length, so a bisection finds the
    prefix whose count is nearest to ``target``.
    """
    from .mesh import rgb_refine

    order = rng.permutation(mesh.n_elements)

    def count(k):
        f = np.zeros(mesh.n_elements, bool)
        f[order[:k]] = True
        return rgb_refine(mesh, f)[0].n_elements, f

    lo, hi = 0, mesh.n_elements
    if target <= mesh.n_elements:
        return np.zeros(mesh.n_elements, bool)
    while lo < hi:
        mid = (lo + hi) // 2
        if count(mid)[0] < target:
            lo = mid + 1
        else:
            hi = mid
    best_k = lo
    if lo > 0 and abs(count(lo - 1)[0] - target) <= abs(count(lo)[0] - target):
        best_k = lo - 1
    return count(best_k)[1]


def matched_random_episode(task, element_counts, rng):
    """Refine at random to follow ``element_counts`` step by step, without relocation.

    Returns ``(final element count, final relative error)``.
    """
    from .mesh import rgb_refine

    mesh = task.initial_mesh
    field_vals = task.initial_field
    for target in element_counts:
        flags = _matched_flags(mesh, target, rng)
        mesh, _ = rgb_refine(mesh, flags)
        field_vals = fem.solve(mesh, task.instance)
    err = fem.global_error_sq(mesh, field_vals, task.ref) / task.initial_error_sq
    return mesh.n_elements, err
