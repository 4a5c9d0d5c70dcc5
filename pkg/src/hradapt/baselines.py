"""
Classical refinement strategies used as comparisons.

* ``uniform``: red-refine every element each step.
* ``oracle``: mark elements whose maximum pointwise error against the
  reference solution is at least ``theta`` times the largest one.
* ``zz``: the same ratio marking driven by a Zienkiewicz-Zhu style
  gradient-recovery estimator, after one or two uniform steps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import fem
from .features import gradient_per_element
from .mesh import rgb_refine, uniform_refine


@dataclass
class HeuristicConfig:
    kind: str = "oracle"
    theta: float = 0.5
    steps: int = 4
    initial_uniform_steps: int = 1

    def __post_init__(self):
        if self.kind not in ("uniform", "oracle", "zz"):
            raise ValueError(f"unknown heuristic {self.kind!r}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.kind == "zz" and self.initial_uniform_steps not in (1, 2):
            raise ValueError("zz uses 1 or 2 initial uniform steps")


def ratio_mark(indicator, theta):
    """Flag ``K`` iff ``indicator[K] >= theta * max(indicator)``; all-zero gives no marks."""
    ind = np.asarray(indicator, float)
    top = ind.max() if len(ind) else 0.0
    if top <= 0:
        return np.zeros(len(ind), bool)
    return ind >= theta * top


def oracle_mark(mesh, field, ref_mesh, ref_field, theta):
    """Ratio marking on the maximum pointwise error against the reference.

    ``ref_mesh`` may also be a prebuilt :class:`~hradapt.fem.Reference`,
    in which case ``ref_field`` is ignored.
    """
    return ratio_mark(fem.eta_inf(mesh, field, ref_mesh, ref_field), theta)


def _recover_at(centroids, grads, weights, x0):
    """Weighted least-squares linear fit of ``grads`` evaluated at ``x0``."""
    if len(grads) < 3:
        return (weights[:, None] * grads).sum(axis=0) / weights.sum()
    P = np.column_stack([np.ones(len(centroids)), centroids - x0])
    sw = np.sqrt(weights)[:, None]
    A = P * sw
    if np.linalg.matrix_rank(A) < 3:
        return (weights[:, None] * grads).sum(axis=0) / weights.sum()
    coef, *_ = np.linalg.lstsq(A, grads * sw, rcond=None)
    return coef[0]


def recovered_gradients(mesh, field):
    """Patch-recovered gradient at every vertex, shape (N_v, 2)."""
    g = gradient_per_element(mesh, field)
    offsets, elems = mesh.vertex_elements
    out = np.zeros((mesh.n_vertices, 2))
    c = mesh.centroids
    for v in range(mesh.n_vertices):
        patch = elems[offsets[v] : offsets[v + 1]]
        gp = g[patch]
        # a patch with one gradient value is already recovered exactly
        if np.all(gp == gp[0]):
            out[v] = gp[0]
            continue
        out[v] = _recover_at(c[patch], gp, mesh.areas[patch], mesh.coords[v])
    return out


def zz_estimate(mesh, field):
    """``sqrt(|K| * mean_v |G*(v) - grad u_K|^2)`` per element."""
    g = gradient_per_element(mesh, field)
    rec = recovered_gradients(mesh, field)
    diff = rec[mesh.tris] - g[:, None, :]
    return np.sqrt(mesh.areas * np.mean(np.sum(diff**2, axis=2), axis=1))


def zz_mark(mesh, field, theta):
    return ratio_mark(zz_estimate(mesh, field), theta)


@dataclass
class Trajectory:
    meshes: list
    fields: list
    log: list

    @property
    def final_mesh(self):
        return self.meshes[-1]

    @property
    def final_field(self):
        return self.fields[-1]

    def write_log(self, path):
        with open(path, "w") as fh:
            for row in self.log:
                fh.write(json.dumps(row) + "\n")


def run_heuristic(config, instance, initial_mesh, ref=None):
    """Refinement trajectory of a heuristic from ``initial_mesh``.

    ``ref`` is a :class:`~hradapt.fem.Reference` (needed by ``oracle`` and
    for error logging).  The trajectory includes the initial mesh.
    """
    mesh = initial_mesh
    field = fem.solve(mesh, instance)
    meshes, fields, log = [mesh], [field], []
    e0 = fem.global_error_sq(mesh, field, ref) if ref is not None else None

    def record(step):
        row = {"step": step, "elements": int(mesh.n_elements), "displacement": 0.0, "tangled": False}
        if ref is not None:
            row["err_rel"] = fem.global_error_rel(mesh, field, ref, initial_error_sq=e0)
        log.append(row)

    record(0)
    plan = []
    if config.kind == "uniform":
        plan = ["uniform"] * config.steps
    elif config.kind == "oracle":
        plan = ["mark"] * config.steps
    else:
        plan = ["uniform"] * config.initial_uniform_steps + ["mark"] * config.steps
    for k, action in enumerate(plan, start=1):
        if action == "uniform":
            mesh = uniform_refine(mesh, 1)
        else:
            if config.kind == "oracle":
                if ref is None:
                    raise ValueError("oracle marking needs a reference solution")
                flags = oracle_mark(mesh, field, ref, None, config.theta)
            else:
                flags = zz_mark(mesh, field, config.theta)
            mesh, _ = rgb_refine(mesh, flags)
        field = fem.solve(mesh, instance)
        meshes.append(mesh)
        fields.append(field)
        record(k)
    return Trajectory(meshes, fields, log)
