"""
Hypergraph view of a mesh and the per-vertex / per-element features fed
to the policy.

Vertices are hypergraph nodes and every triangle is a hyperedge joining
its three corners.  Features are raw; normalisation happens in
:mod:`hradapt.ppo`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import basis_gradients
from .mesh import CORNER, EDGE, INTERIOR, MeshError, aspect_ratios, principal_orientations

VERTEX_DIM = 6
ELEMENT_BASE_DIM = 12
VERTEX_COLUMNS = ["x", "y", "u", "interior", "edge", "corner"]
ELEMENT_COLUMNS = [
    "area",
    "u_mean",
    "u_std",
    "step",
    "alpha",
    "aspect",
    "sin_theta",
    "cos_theta",
    "grad_norm",
    "g_max",
    "g_std",
    "align",
]


@dataclass(eq=False)
class HypergraphState:
    incidence: sp.csr_matrix
    adjacency: sp.csr_matrix
    vertex_feats: np.ndarray
    elem_feats: np.ndarray
    vertex_deg: np.ndarray
    elem_deg: np.ndarray
    boundary_mask: np.ndarray


def build_structure(mesh):
    """Incidence ``H`` (N_v x N_e), adjacency ``A`` (N_v x N_v) and degrees."""
    nv, ne = mesh.n_vertices, mesh.n_elements
    rows = mesh.tris.ravel()
    cols = np.repeat(np.arange(ne), 3)
    H = sp.csr_matrix((np.ones(3 * ne), (rows, cols)), shape=(nv, ne))
    co = (H @ H.T).tocsr()
    co.setdiag(0)
    co.eliminate_zeros()
    A = (co > 0).astype(float).tocsr()
    vdeg = np.asarray(H.sum(axis=1)).ravel()
    edeg = np.asarray(H.sum(axis=0)).ravel()
    return H, A, (vdeg, edeg)


def vertex_features(mesh, field):
    """Rows ``[x, y, u, one-hot(interior, edge, corner)]``."""
    onehot = np.zeros((mesh.n_vertices, 3))
    onehot[np.arange(mesh.n_vertices), mesh.vclass] = 1.0
    return np.column_stack([mesh.coords, np.asarray(field, float), onehot])


def gradient_per_element(mesh, field):
    """Constant gradient of the P1 interpolant on each element."""
    try:
        g = basis_gradients(mesh)
    except Exception as exc:  # tangled meshes have no valid basis either
        raise MeshError("degenerate element") from exc
    u = np.asarray(field, float)[mesh.tris]
    # differences against the first vertex make constant fields exactly flat
    return np.einsum("eid,ei->ed", g[:, 1:], u[:, 1:] - u[:, :1])


def edge_jump_table(mesh, field):
    """``|u_b - u_a| / l_ab`` for the three local edges of every element."""
    lens = mesh.edge_lengths
    if np.any(lens <= 0):
        raise MeshError("zero-length edge")
    u = np.asarray(field, float)[mesh.tris]
    return np.abs(np.roll(u, -1, axis=1) - u) / lens


def edge_jump_stats(mesh, field, elem):
    """``(g_max, g_std)`` of the normalised endpoint jumps on one element."""
    lens = mesh.edge_lengths[elem]
    if np.any(lens <= 0):
        raise MeshError("zero-length edge")
    u = np.asarray(field, float)[mesh.tris[elem]]
    j = np.abs(np.roll(u, -1) - u) / lens
    return float(j.max()), float(j.std())


def _alignment(grad, theta):
    d = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    norm = np.linalg.norm(grad, axis=-1)
    dot = np.sum(grad * d, axis=-1)
    out = np.zeros_like(norm)
    nz = norm > 0
    out[nz] = dot[nz] / norm[nz]
    return out


def alignment(mesh, field, elem):
    """Signed cosine between the element gradient and its principal axis."""
    grad = gradient_per_element(mesh, field)[elem]
    theta = principal_orientations(mesh)[elem]
    return float(_alignment(grad[None], np.array([theta]))[0])


def task_features(mesh, instance):
    """Poisson: load at the centroid.  Heat: distances to both path endpoints."""
    if instance is None:
        return np.zeros((mesh.n_elements, 0))
    c = mesh.centroids
    if instance.kind == "poisson":
        return instance.source(c)[:, None]
    d0 = np.linalg.norm(c - np.asarray(instance.p0), axis=1)
    d1 = np.linalg.norm(c - np.asarray(instance.p1), axis=1)
    return np.column_stack([d0, d1])


def element_features(mesh, field, step, alpha, task_feats=None):
    u = np.asarray(field, float)[mesh.tris]
    grad = gradient_per_element(mesh, field)
    theta = principal_orientations(mesh)
    jumps = edge_jump_table(mesh, field)
    ne = mesh.n_elements
    cols = [
        mesh.areas,
        u.mean(axis=1),
        u.std(axis=1),
        np.full(ne, float(step)),
        np.full(ne, float(alpha)),
        aspect_ratios(mesh),
        np.sin(theta),
        np.cos(theta),
        np.linalg.norm(grad, axis=1),
        jumps.max(axis=1),
        jumps.std(axis=1),
        _alignment(grad, theta),
    ]
    out = np.column_stack(cols)
    if task_feats is not None and np.size(task_feats):
        out = np.column_stack([out, np.asarray(task_feats, float).reshape(ne, -1)])
    return out


def build_state(mesh, field, step, alpha, instance=None):
    """Assemble the full :class:`HypergraphState`."""
    H, A, (vdeg, edeg) = build_structure(mesh)
    vf = vertex_features(mesh, field)
    ef = element_features(mesh, field, step, alpha, task_features(mesh, instance))
    if not (np.all(np.isfinite(vf)) and np.all(np.isfinite(ef))):
        raise MeshError("non-finite features")
    return HypergraphState(H, A, vf, ef, vdeg, edeg, mesh.vclass.copy())


def dump_features_csv(state, prefix):
    """Write ``<prefix>_vertex.csv`` and ``<prefix>_element.csv``."""
    ecols = ELEMENT_COLUMNS + [f"task{i}" for i in range(state.elem_feats.shape[1] - ELEMENT_BASE_DIM)]
    np.savetxt(f"{prefix}_vertex.csv", state.vertex_feats, delimiter=",", header=",".join(VERTEX_COLUMNS), comments="", fmt="%.17g")
    np.savetxt(f"{prefix}_element.csv", state.elem_feats, delimiter=",", header=",".join(ecols), comments="", fmt="%.17g")


__all__ = [
    "HypergraphState",
    "build_structure",
    "vertex_features",
    "element_features",
    "gradient_per_element",
    "edge_jump_stats",
    "alignment",
    "task_features",
    "build_state",
    "dump_features_csv",
    "INTERIOR",
    "EDGE",
    "CORNER",
]
