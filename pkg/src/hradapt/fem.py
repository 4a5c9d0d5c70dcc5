"""
Linear finite elements on triangle meshes.

Poisson and heat problems with homogeneous Dirichlet data are solved with
P1 elements.  Load vectors use one-point centroid quadrature.  Error
indicators compare a coarse solution against a fine reference solution
sampled at the reference element centroids.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .mesh import Mesh, MeshError

DENSE_LIMIT = 2000
CG_TOL = 1e-12
RESIDUAL_TOL = 1e-10
HEAT_DT = 0.5
HEAT_STEPS = 20
HEAT_T_END = 10.0


class FEMError(RuntimeError):
    """Raised when a system cannot be assembled or solved."""


@dataclass
class ProblemInstance:
    """Everything needed to rebuild one PDE task.

    ``kind`` is ``'poisson'`` or ``'heat'``.  Poisson tasks carry a
    Gaussian mixture load; heat tasks carry the start and end of the
    moving source path.
    """

    kind: str
    domain: str
    polygon: list
    seed: int
    means: list = field(default_factory=list)
    covs: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    p0: list = field(default_factory=list)
    p1: list = field(default_factory=list)
    diffusivity: float = 1e-3
    amplitude: float = 1000.0
    decay: float = 100.0

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def source(self, points, t=None):
        """Right-hand side evaluated at ``points`` (and time ``t`` for heat)."""
        if self.kind == "poisson":
            return gmm_load(self, points)
        if self.kind == "heat":
            return heat_source(self, points, t)
        raise FEMError(f"unknown problem kind {self.kind!r}")


def sample_instance(kind, polygon, seed, domain="custom", max_draws=10000):
    """Draw random task parameters inside ``polygon``.

    Poisson means come from ``U(0.1, 0.9)^2`` by rejection against the
    domain; covariances are log-uniform diagonals in ``[1e-4, 1e-3]``
    under a random rotation; weights are ``exp(N(0, 1)) + 1``, normalised.
    Heat path endpoints are uniform over the domain.
    """
    rng = np.random.default_rng(seed)

    def inside_point(lo, hi):
        for _ in range(max_draws):
            p = rng.uniform(lo, hi, size=2)
            if polygon.contains(p[None], tol=0.0)[0]:
                return p
        raise FEMError("rejection sampling exhausted: no point inside the domain")

    inst = ProblemInstance(kind=kind, domain=domain, polygon=polygon.corners.tolist(), seed=int(seed))
    if kind == "poisson":
        means, covs = [], []
        for _ in range(3):
            means.append(inside_point(0.1, 0.9).tolist())
            s = np.exp(rng.uniform(np.log(1e-4), np.log(1e-3), size=2))
            ang = rng.uniform(0, np.pi)
            rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            cov = rot @ np.diag(s) @ rot.T
            covs.append((0.5 * (cov + cov.T)).tolist())
        w = np.exp(rng.normal(size=3)) + 1.0
        inst.means, inst.covs, inst.weights = means, covs, (w / w.sum()).tolist()
    elif kind == "heat":
        lo, hi = polygon.corners.min(axis=0), polygon.corners.max(axis=0)
        inst.p0 = inside_point(lo, hi).tolist()
        inst.p1 = inside_point(lo, hi).tolist()
    else:
        raise FEMError(f"unknown problem kind {kind!r}")
    return inst


def gmm_load(instance, points):
    """Gaussian-mixture density at ``points``."""
    if instance.kind != "poisson":
        raise FEMError("mixture load is only defined for poisson instances")
    x = np.asarray(points, float).reshape(-1, 2)
    out = np.zeros(len(x))
    for mu, cov, w in zip(instance.means, instance.covs, instance.weights):
        cov = np.asarray(cov, float)
        d = x - np.asarray(mu, float)
        inv = np.linalg.inv(cov)
        q = np.einsum("ni,ij,nj->n", d, inv, d)
        out += w * np.exp(-0.5 * q) / (2 * np.pi * np.sqrt(np.linalg.det(cov)))
    return out


def heat_source(instance, points, t):
    """Moving exponential source ``A exp(-c |x - p(t)|_1)``."""
    x = np.asarray(points, float).reshape(-1, 2)
    p0, p1 = np.asarray(instance.p0, float), np.asarray(instance.p1, float)
    p = p0 + (t / HEAT_T_END) * (p1 - p0)
    return instance.amplitude * np.exp(-instance.decay * np.abs(x - p).sum(axis=1))


# ----------------------------------------------------------------------
# assembly


def basis_gradients(mesh):
    """Gradients of the three hat functions on each element, shape (N_e, 3, 2)."""
    z = mesh.coords[mesh.tris]
    det = mesh.dets
    if np.any(det <= 0):
        raise FEMError("singular system: tangled or degenerate element")
    # gradient of lambda_i is rot90 of the opposite edge over det
    e0 = z[:, 2] - z[:, 1]
    e1 = z[:, 0] - z[:, 2]
    e2 = z[:, 1] - z[:, 0]
    g = np.stack([e0, e1, e2], axis=1)
    g = np.stack([-g[..., 1], g[..., 0]], axis=-1) / det[:, None, None]
    return g


def _scatter(mesh, local):
    n = mesh.n_vertices
    rows = np.repeat(mesh.tris, 3, axis=1).ravel()
    cols = np.tile(mesh.tris, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def stiffness_matrix(mesh):
    g = basis_gradients(mesh)
    local = mesh.areas[:, None, None] * np.einsum("eid,ejd->eij", g, g)
    return _scatter(mesh, local)


def mass_matrix(mesh):
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _scatter(mesh, mesh.areas[:, None, None] * ref[None])


def load_vector(mesh, fvals):
    """Centroid-rule load vector for element-wise source values ``fvals``."""
    per = np.repeat((mesh.areas * fvals / 3.0)[:, None], 3, axis=1)
    return np.bincount(mesh.tris.ravel(), weights=per.ravel(), minlength=mesh.n_vertices)


class _Reduced:
    """Solver for a Dirichlet-reduced SPD system, factored once."""

    def __init__(self, matrix, free):
        self.free = free
        self.A = matrix[free][:, free].tocsr()
        self.n = self.A.shape[0]
        self.chol = None
        if self.n == 0:
            return
        if self.n <= DENSE_LIMIT:
            try:
                self.chol = sla.cho_factor(self.A.toarray())
            except np.linalg.LinAlgError as exc:
                raise FEMError("singular system") from exc
        else:
            diag = self.A.diagonal()
            if np.any(diag <= 0):
                raise FEMError("singular system")
            self.precond = spla.LinearOperator(self.A.shape, matvec=lambda r: r / diag)

    def solve(self, rhs):
        b = rhs[self.free]
        if self.n == 0:
            return b.copy()
        if self.chol is not None:
            x = sla.cho_solve(self.chol, b)
        else:
            x, info = spla.cg(self.A, b, rtol=CG_TOL, atol=0.0, maxiter=10 * self.n, M=self.precond)
            if info != 0:
                raise FEMError(f"CG did not converge (info={info})")
        if not np.all(np.isfinite(x)):
            raise FEMError("non-finite solution")
        bn = np.linalg.norm(b)
        if bn > 0 and np.linalg.norm(self.A @ x - b) > RESIDUAL_TOL * bn:
            raise FEMError("linear solve residual above tolerance")
        return x


def _lift(mesh, free, x):
    u = np.zeros(mesh.n_vertices)
    u[free] = x
    return u


def solve_poisson(mesh, instance):
    """P1 solution of ``-lap u = f`` with ``u = 0`` on the boundary.

    ``instance`` is a :class:`ProblemInstance` or any callable mapping an
    ``(n, 2)`` point array to source values.
    """
    source = instance if callable(instance) else instance.source
    free = np.flatnonzero(~mesh.boundary_vertices)
    solver = _Reduced(stiffness_matrix(mesh), free)
    rhs = load_vector(mesh, source(mesh.centroids))
    return _lift(mesh, free, solver.solve(rhs))


def solve_heat(mesh, instance, dt=HEAT_DT, steps=HEAT_STEPS, return_history=False):
    """Implicit Euler for ``u_t - a lap u = f`` from ``u(0) = 0``; returns ``u(steps * dt)``."""
    free = np.flatnonzero(~mesh.boundary_vertices)
    M = mass_matrix(mesh)
    K = stiffness_matrix(mesh)
    solver = _Reduced(M + dt * instance.diffusivity * K, free)
    u = np.zeros(mesh.n_vertices)
    hist = [u]
    for k in range(1, steps + 1):
        t = k * dt
        rhs = M @ u + dt * load_vector(mesh, instance.source(mesh.centroids, t))
        u = _lift(mesh, free, solver.solve(rhs))
        hist.append(u)
    return (u, hist) if return_history else u


def solve(mesh, instance):
    if instance.kind == "poisson":
        return solve_poisson(mesh, instance)
    if instance.kind == "heat":
        return solve_heat(mesh, instance)
    raise FEMError(f"unknown problem kind {instance.kind!r}")


# ----------------------------------------------------------------------
# point location and indicators


def barycentric(mesh, elems, points):
    """Barycentric coordinates of ``points[i]`` in element ``elems[i]``."""
    z = mesh.coords[mesh.tris[elems]]
    e1 = z[:, 1] - z[:, 0]
    e2 = z[:, 2] - z[:, 0]
    d = points - z[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    l1 = (d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det
    l2 = (e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


def locate(mesh, points, tol=1e-10, k=8):
    """Containing element of each point.

    A candidate from the ``k`` nearest centroids is accepted when all its
    barycentric coordinates exceed ``tol``; otherwise every element is
    scanned and the one with the largest minimum barycentric coordinate
    wins, provided that coordinate is at least ``-tol``.
    """
    pts = np.asarray(points, float).reshape(-1, 2)
    ne = mesh.n_elements
    k = min(k, ne)
    _, cand = cKDTree(mesh.centroids).query(pts, k=k)
    cand = cand.reshape(len(pts), k)
    elem = np.full(len(pts), -1, np.int64)
    for j in range(k):
        todo = elem < 0
        if not np.any(todo):
            break
        c = cand[todo, j]
        lam = barycentric(mesh, c, pts[todo])
        ok = lam.min(axis=1) > tol
        idx = np.flatnonzero(todo)[ok]
        elem[idx] = c[ok]
    for i in np.flatnonzero(elem < 0):
        lam = barycentric(mesh, np.arange(ne), np.repeat(pts[i : i + 1], ne, axis=0))
        score = lam.min(axis=1)
        best = int(np.argmax(score))
        if score[best] < -tol:
            raise MeshError(f"point {pts[i].tolist()} lies outside the mesh")
        elem[i] = best
    return elem


def interpolate_at(mesh, field, points, elems=None):
    """Evaluate the P1 interpolant of ``field`` at ``points``."""
    pts = np.asarray(points, float).reshape(-1, 2)
    if elems is None:
        elems = locate(mesh, pts)
    lam = barycentric(mesh, elems, pts)
    return np.sum(lam * field[mesh.tris[elems]], axis=1)


class Reference:
    """Fine reference solution sampled at its element centroids."""

    def __init__(self, mesh, field):
        self.mesh = mesh
        self.field = np.asarray(field, float)
        self.points = mesh.centroids
        self.weights = mesh.areas
        self.values = self.field[mesh.tris].mean(axis=1)
        self.norm_sq = float(np.sum(self.weights * self.values**2))

    def differences(self, mesh, field):
        """``(element id, |u_ref - u_h|)`` for each reference sample."""
        elems = locate(mesh, self.points)
        diff = np.abs(self.values - interpolate_at(mesh, field, self.points, elems))
        return elems, diff


def _as_reference(ref_mesh, ref_field):
    if isinstance(ref_mesh, Reference):
        return ref_mesh
    return Reference(ref_mesh, ref_field)


def eta_inf(mesh, field, ref_mesh, ref_field=None):
    """Per-element maximum pointwise error over the reference samples inside it."""
    ref = _as_reference(ref_mesh, ref_field)
    elems, diff = ref.differences(mesh, field)
    out = np.zeros(mesh.n_elements)
    np.maximum.at(out, elems, diff)
    return out


def eta_2_sq(mesh, field, ref_mesh, ref_field=None):
    """Per-element area-weighted squared error over the reference samples inside it."""
    ref = _as_reference(ref_mesh, ref_field)
    elems, diff = ref.differences(mesh, field)
    out = np.zeros(mesh.n_elements)
    np.add.at(out, elems, ref.weights * diff**2)
    return out


def indicators(mesh, field, ref):
    """Both indicators from a single point location pass."""
    elems, diff = ref.differences(mesh, field)
    inf = np.zeros(mesh.n_elements)
    two = np.zeros(mesh.n_elements)
    np.maximum.at(inf, elems, diff)
    np.add.at(two, elems, ref.weights * diff**2)
    return inf, two


def global_error_sq(mesh, field, ref_mesh, ref_field=None):
    return float(np.sum(eta_2_sq(mesh, field, ref_mesh, ref_field)))


def global_error_rel(mesh, field, ref_mesh, ref_field=None, initial_error_sq=None):
    """Global squared error, divided by ``initial_error_sq`` when given."""
    e = global_error_sq(mesh, field, ref_mesh, ref_field)
    if initial_error_sq is None:
        return e
    return e / initial_error_sq if initial_error_sq > 0 else 0.0


# ----------------------------------------------------------------------
# field text format


def save_field(values, path):
    with open(path, "w") as fh:
        fh.write(f"FIELD {len(values)}\n")
        for v in values:
            fh.write(f"{v:.17g}\n")


def load_field(path):
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 2 or head[0] != "FIELD":
            raise FEMError(f"malformed field file {path}")
        vals = np.array([float(ln) for ln in fh if ln.strip()])
    if len(vals) != int(head[1]):
        raise FEMError(f"malformed field file {path}")
    return vals
