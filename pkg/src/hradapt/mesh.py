"""
Planar triangular meshes.

A :class:`Mesh` stores vertex coordinates, counter-clockwise triangle
connectivity, a per-vertex boundary classification and the lineage
produced by the last refinement.  All operations return new meshes;
arrays held by a mesh are never modified in place.

Boundary classes are encoded as small integers::

    INTERIOR = 0, EDGE = 1, CORNER = 2

and ``vcomp[i]`` holds the boundary component (polygon segment index) of
an edge vertex, ``-1`` otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

INTERIOR, EDGE, CORNER = 0, 1, 2
BOUNDARY_TOL = 1e-10

# local edge k joins local vertices (k, k+1)
_LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


class MeshError(ValueError):
    """Raised for invalid meshes or geometry (tangling, off-boundary vertices)."""


@dataclass(frozen=True, eq=False)
class Polygon:
    """Simple polygon with counter-clockwise corners.

    Boundary component ``k`` is the segment ``corners[k] -> corners[k+1]``.
    """

    corners: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=float).reshape(-1, 2)
        x, y = c[:, 0], c[:, 1]
        signed = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
        if signed < 0:
            c = c[::-1].copy()
        object.__setattr__(self, "corners", c)

    @property
    def n(self):
        return len(self.corners)

    @property
    def starts(self):
        return self.corners

    @property
    def ends(self):
        return np.roll(self.corners, -1, axis=0)

    @cached_property
    def tangents(self):
        d = self.ends - self.starts
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    @property
    def area(self):
        x, y = self.corners[:, 0], self.corners[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def segment_distances(self, points):
        """Distance of every point to every segment, shape (n_points, n_segments)."""
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        a, b = self.starts, self.ends
        ab = b - a
        t = np.einsum("pkd,kd->pk", p[:, None, :] - a[None], ab) / np.sum(ab * ab, axis=1)
        t = np.clip(t, 0.0, 1.0)
        proj = a[None] + t[..., None] * ab[None]
        return np.linalg.norm(p[:, None, :] - proj, axis=2)

    def contains(self, points, tol=BOUNDARY_TOL):
        """Closed point-in-polygon test (boundary counts as inside)."""
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        a, b = self.starts, self.ends
        px, py = p[:, 0:1], p[:, 1:2]
        cond = (a[None, :, 1] > py) != (b[None, :, 1] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a[None, :, 0] + (py - a[None, :, 1]) * (b[None, :, 0] - a[None, :, 0]) / (
                b[None, :, 1] - a[None, :, 1]
            )
        inside = np.sum(cond & (px < xint), axis=1) % 2 == 1
        on_boundary = self.segment_distances(p).min(axis=1) <= tol
        return inside | on_boundary

    def classify(self, points, tol=BOUNDARY_TOL):
        """Return ``(vclass, vcomp)`` for arbitrary points from geometry alone."""
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        vclass = np.zeros(len(p), dtype=np.int8)
        vcomp = np.full(len(p), -1, dtype=np.int64)
        if len(p) == 0:
            return vclass, vcomp
        dcorner = np.linalg.norm(p[:, None, :] - self.corners[None], axis=2)
        is_corner = dcorner.min(axis=1) <= tol
        dseg = self.segment_distances(p)
        on_edge = (dseg.min(axis=1) <= tol) & ~is_corner
        vclass[is_corner] = CORNER
        vclass[on_edge] = EDGE
        vcomp[on_edge] = np.argmin(dseg[on_edge], axis=1)
        return vclass, vcomp

    def corner_components(self, point, tol=BOUNDARY_TOL):
        """Segments that contain ``point`` (two for a polygon corner)."""
        d = self.segment_distances(np.asarray(point)[None])[0]
        return np.flatnonzero(d <= tol)

    def to_dict(self):
        return {"corners": self.corners.tolist()}


@dataclass(frozen=True, eq=False)
class Mesh:
    coords: np.ndarray
    tris: np.ndarray
    vclass: np.ndarray | None = None
    vcomp: np.ndarray | None = None
    boundary: Polygon | None = None
    parent: np.ndarray | None = None
    vertex_origin: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=float).reshape(-1, 2)
        tris = np.ascontiguousarray(self.tris, dtype=np.int64).reshape(-1, 3)
        if tris.size and (tris.min() < 0 or tris.max() >= len(coords)):
            raise MeshError("triangle vertex index out of range")
        nv, ne = len(coords), len(tris)
        vclass = np.zeros(nv, np.int8) if self.vclass is None else np.asarray(self.vclass, np.int8)
        vcomp = np.full(nv, -1, np.int64) if self.vcomp is None else np.asarray(self.vcomp, np.int64)
        parent = np.full(ne, -1, np.int64) if self.parent is None else np.asarray(self.parent, np.int64)
        origin = (
            np.full(nv, -1, np.int64)
            if self.vertex_origin is None
            else np.asarray(self.vertex_origin, np.int64)
        )
        for name, val in [
            ("coords", coords),
            ("tris", tris),
            ("vclass", vclass),
            ("vcomp", vcomp),
            ("parent", parent),
            ("vertex_origin", origin),
        ]:
            object.__setattr__(self, name, val)

    # ------------------------------------------------------------------
    # basic sizes and geometry
    @property
    def n_vertices(self):
        return len(self.coords)

    @property
    def n_elements(self):
        return len(self.tris)

    @cached_property
    def dets(self):
        """Jacobian determinant (twice the signed area) per element."""
        z = self.coords[self.tris]
        e1 = z[:, 1] - z[:, 0]
        e2 = z[:, 2] - z[:, 0]
        return e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]

    @cached_property
    def areas(self):
        return 0.5 * self.dets

    @cached_property
    def centroids(self):
        return self.coords[self.tris].mean(axis=1)

    @cached_property
    def edge_lengths(self):
        """Length of local edges (v0v1, v1v2, v2v0) per element, shape (N_e, 3)."""
        z = self.coords[self.tris]
        return np.linalg.norm(np.roll(z, -1, axis=1) - z, axis=2)

    # ------------------------------------------------------------------
    # topology
    @cached_property
    def _edge_data(self):
        local = np.sort(self.tris[:, _LOCAL_EDGES], axis=2).reshape(-1, 2)
        edges, inverse, counts = np.unique(local, axis=0, return_inverse=True, return_counts=True)
        return edges, inverse.reshape(-1, 3), counts

    @property
    def edges(self):
        """Unique undirected edges, sorted vertex pairs."""
        return self._edge_data[0]

    @property
    def elem_edges(self):
        """Edge id of each local edge, shape (N_e, 3)."""
        return self._edge_data[1]

    @property
    def edge_counts(self):
        """Number of elements sharing each edge."""
        return self._edge_data[2]

    @cached_property
    def boundary_vertices(self):
        """Vertices on topological boundary edges."""
        e = self.edges[self.edge_counts == 1]
        mask = np.zeros(self.n_vertices, bool)
        mask[e.ravel()] = True
        return mask

    @cached_property
    def vertex_elements(self):
        """CSR-style (offsets, element ids) for the elements incident to each vertex."""
        flat = self.tris.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n_vertices)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return offsets, order // 3

    @property
    def edge_component_dir(self):
        """Unit tangent per boundary component."""
        if self.boundary is None:
            return np.zeros((0, 2))
        return self.boundary.tangents

    def with_coords(self, coords):
        """Same connectivity, classification and lineage with new vertex positions."""
        return replace(self, coords=np.array(coords, dtype=float))

    def is_conforming(self):
        return bool(np.all((self.edge_counts == 1) | (self.edge_counts == 2)))


@dataclass(frozen=True, eq=False)
class RefinementMaps:
    """Lineage of one refinement step.

    Children of old element ``j`` are the contiguous new elements
    ``child_offsets[j]:child_offsets[j+1]``; old vertex ``i`` persists as new
    vertex ``vertex_persist[i]``.
    """

    child_offsets: np.ndarray
    vertex_persist: np.ndarray

    @property
    def n_parents(self):
        return len(self.child_offsets) - 1

    @property
    def n_children(self):
        return np.diff(self.child_offsets)

    @cached_property
    def elem_children(self):
        o = self.child_offsets
        return [list(range(o[j], o[j + 1])) for j in range(self.n_parents)]

    @cached_property
    def child_parent(self):
        return np.repeat(np.arange(self.n_parents), self.n_children)

    @classmethod
    def identity(cls, n_elements, n_vertices):
        return cls(np.arange(n_elements + 1), np.arange(n_vertices))


# ----------------------------------------------------------------------
# geometry queries


def jacobian_det(mesh, elem):
    z = mesh.coords[mesh.tris[elem]]
    e1, e2 = z[1] - z[0], z[2] - z[0]
    return float(e1[0] * e2[1] - e1[1] * e2[0])


def detect_tangled(mesh):
    """Element ids with non-positive Jacobian determinant."""
    return set(np.flatnonzero(mesh.dets <= 0.0).tolist())


def _check_nondegenerate(mesh, elems):
    lens = mesh.edge_lengths[elems]
    if np.any(lens.min(axis=-1) <= 0.0) or np.any(np.abs(mesh.dets[elems]) <= 0.0):
        raise MeshError("degenerate element")


def aspect_ratios(mesh):
    _check_nondegenerate(mesh, slice(None))
    lens = mesh.edge_lengths
    return lens.max(axis=1) / lens.min(axis=1)


def aspect_ratio(mesh, elem):
    """Longest over shortest edge length of one element."""
    _check_nondegenerate(mesh, elem)
    lens = mesh.edge_lengths[elem]
    return float(lens.max() / lens.min())


def principal_orientations(mesh):
    """Principal-axis angle per element, canonicalised to (-pi/2, pi/2].

    The angle comes from the leading left singular vector of the element
    Jacobian whose columns are the edge vectors leaving local vertex 0.
    """
    _check_nondegenerate(mesh, slice(None))
    z = mesh.coords[mesh.tris]
    jac = np.stack([z[:, 1] - z[:, 0], z[:, 2] - z[:, 0]], axis=2)
    u, _, _ = np.linalg.svd(jac)
    theta = np.arctan2(u[:, 1, 0], u[:, 0, 0])
    # singular vectors are defined up to sign: fold the axis into (-pi/2, pi/2]
    theta = np.where(theta > np.pi / 2, theta - np.pi, theta)
    theta = np.where(theta <= -np.pi / 2, theta + np.pi, theta)
    return theta


def principal_orientation(mesh, elem):
    """Return ``(theta, sin(theta), cos(theta))`` for one element."""
    _check_nondegenerate(mesh, elem)
    sub = Mesh(mesh.coords, mesh.tris[[elem]])
    theta = float(principal_orientations(sub)[0])
    return theta, np.sin(theta), np.cos(theta)


# ----------------------------------------------------------------------
# boundary classification


def classify_boundary(mesh, geometry, tol=BOUNDARY_TOL):
    """Tag vertices as interior, edge (with component) or corner.

    ``geometry`` is a :class:`Polygon` or an array of its corners.
    """
    poly = geometry if isinstance(geometry, Polygon) else Polygon(np.asarray(geometry, float))
    if not np.all(poly.contains(mesh.coords, tol)):
        raise MeshError("vertex outside the domain")
    vclass, vcomp = poly.classify(mesh.coords, tol)
    off = mesh.boundary_vertices & (vclass == INTERIOR)
    if np.any(off):
        raise MeshError(f"boundary vertex {int(np.flatnonzero(off)[0])} is off the domain boundary")
    return replace(mesh, vclass=vclass, vcomp=vcomp, boundary=poly)


# ----------------------------------------------------------------------
# refinement


def _midpoint_classes(mesh, edge_ids, new_coords):
    """Boundary class of midpoints created on ``edge_ids``."""
    n = len(edge_ids)
    vclass = np.zeros(n, np.int8)
    vcomp = np.full(n, -1, np.int64)
    on_bnd = mesh.edge_counts[edge_ids] == 1
    if not np.any(on_bnd):
        return vclass, vcomp
    ends = mesh.edges[edge_ids[on_bnd]]
    comp = np.where(mesh.vclass[ends[:, 0]] == EDGE, mesh.vcomp[ends[:, 0]], mesh.vcomp[ends[:, 1]])
    if mesh.boundary is not None:
        need = comp < 0
        if np.any(need):
            _, gcomp = mesh.boundary.classify(new_coords[on_bnd][need])
            comp[need] = gcomp
    # without a polygon, a boundary edge between two corners has no known component
    sub_class = np.where(comp >= 0, EDGE, INTERIOR).astype(np.int8)
    vclass[on_bnd] = sub_class
    vcomp[on_bnd] = comp
    return vclass, vcomp


def rgb_refine(mesh, flags):
    """Conforming red-green-blue refinement.

    Flagged elements are red-split into four similar children.  Every edge
    of a red element is marked; neighbours with one marked edge are
    bisected (green), with two marked edges bisected twice (blue), and with
    three promoted to red.  Because green and blue splits only use edges
    that are already marked, the closure reaches its fixpoint in one pass.

    Returns
    -------
    (Mesh, RefinementMaps)
    """
    flags = np.asarray(flags).astype(bool).reshape(-1)
    if len(flags) != mesh.n_elements:
        raise MeshError("flag vector length does not match element count")
    if np.any(mesh.dets <= 0.0):
        raise MeshError("cannot refine a tangled mesh")
    nv, ne = mesh.n_vertices, mesh.n_elements
    if not np.any(flags):
        new = replace(
            mesh,
            parent=np.arange(ne),
            vertex_origin=np.arange(nv),
        )
        return new, RefinementMaps.identity(ne, nv)

    elem_edges = mesh.elem_edges
    marked = np.zeros(len(mesh.edges), bool)
    marked[elem_edges[flags].ravel()] = True

    marked_ids = np.flatnonzero(marked)
    mid_index = np.full(len(mesh.edges), -1, np.int64)
    mid_index[marked_ids] = nv + np.arange(len(marked_ids))
    e = mesh.edges[marked_ids]
    mid_coords = 0.5 * (mesh.coords[e[:, 0]] + mesh.coords[e[:, 1]])
    mid_class, mid_comp = _midpoint_classes(mesh, marked_ids, mid_coords)

    local_marked = marked[elem_edges]  # (ne, 3)
    nmark = local_marked.sum(axis=1)
    n_children = np.array([1, 2, 3, 4])[nmark]
    offsets = np.concatenate([[0], np.cumsum(n_children)])
    new_tris = np.empty((offsets[-1], 3), np.int64)
    mids = mid_index[elem_edges]  # (ne, 3): midpoint of local edge k, or -1
    rows = np.arange(ne)

    def place(sel, children):
        # children: (len(sel), c, 3)
        c = children.shape[1]
        pos = offsets[sel][:, None] + np.arange(c)[None]
        new_tris[pos.ravel()] = children.reshape(-1, 3)

    # unchanged
    sel = np.flatnonzero(nmark == 0)
    place(sel, mesh.tris[sel][:, None, :])

    # red: corner children 0..2 then centre
    sel = np.flatnonzero(nmark == 3)
    if len(sel):
        v = mesh.tris[sel]
        m01, m12, m20 = mids[sel, 0], mids[sel, 1], mids[sel, 2]
        ch = np.stack(
            [
                np.stack([v[:, 0], m01, m20], 1),
                np.stack([m01, v[:, 1], m12], 1),
                np.stack([m20, m12, v[:, 2]], 1),
                np.stack([m01, m12, m20], 1),
            ],
            axis=1,
        )
        place(sel, ch)

    # green: rotate so the marked edge is local edge (a, b)
    sel = np.flatnonzero(nmark == 1)
    if len(sel):
        k = np.argmax(local_marked[sel], axis=1)
        a = mesh.tris[sel, k]
        b = mesh.tris[sel, (k + 1) % 3]
        c = mesh.tris[sel, (k + 2) % 3]
        m = mids[sel, k]
        place(sel, np.stack([np.stack([a, m, c], 1), np.stack([m, b, c], 1)], axis=1))

    # blue: rotate so the unmarked edge is (c, a); bisect the longer marked edge first
    sel = np.flatnonzero(nmark == 2)
    if len(sel):
        u = np.argmin(local_marked[sel], axis=1)
        r = (u + 1) % 3
        a = mesh.tris[sel, r]
        b = mesh.tris[sel, (r + 1) % 3]
        c = mesh.tris[sel, (r + 2) % 3]
        m0 = mids[sel, r]
        m1 = mids[sel, (r + 1) % 3]
        lab = mesh.edge_lengths[sel, r]
        lbc = mesh.edge_lengths[sel, (r + 1) % 3]
        first_ab = (lab >= lbc)[:, None, None]
        ch_ab = np.stack([np.stack([a, m0, c], 1), np.stack([m0, b, m1], 1), np.stack([m0, m1, c], 1)], 1)
        ch_bc = np.stack([np.stack([a, m0, m1], 1), np.stack([m0, b, m1], 1), np.stack([a, m1, c], 1)], 1)
        place(sel, np.where(first_ab, ch_ab, ch_bc))

    coords = np.vstack([mesh.coords, mid_coords])
    vclass = np.concatenate([mesh.vclass, mid_class])
    vcomp = np.concatenate([mesh.vcomp, mid_comp])
    parent = np.repeat(rows, n_children)
    origin = np.concatenate([np.arange(nv), np.full(len(marked_ids), -1)])
    new = Mesh(
        coords,
        new_tris,
        vclass=vclass,
        vcomp=vcomp,
        boundary=mesh.boundary,
        parent=parent,
        vertex_origin=origin,
        meta=dict(mesh.meta),
    )
    return new, RefinementMaps(offsets, np.arange(nv))


def uniform_refine(mesh, k):
    """``k`` rounds of red refinement of every element."""
    if k < 0:
        raise ValueError("k must be non-negative")
    for _ in range(k):
        mesh, _ = rgb_refine(mesh, np.ones(mesh.n_elements, bool))
    return mesh


# ----------------------------------------------------------------------
# text format


def save_mesh(mesh, path):
    """Write ``N_v N_e``, then ``x y class component`` and ``i j k parent`` lines."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_elements}\n")
        for (x, y), c, k in zip(mesh.coords, mesh.vclass, mesh.vcomp):
            fh.write(f"{x:.17g} {y:.17g} {int(c)} {int(k)}\n")
        for (i, j, k), p in zip(mesh.tris, mesh.parent):
            fh.write(f"{i} {j} {k} {p}\n")


def boundary_loop(mesh):
    """Boundary vertices in counter-clockwise order (single loop assumed)."""
    t = mesh.tris
    directed = np.stack([t[:, _LOCAL_EDGES[:, 0]].ravel(), t[:, _LOCAL_EDGES[:, 1]].ravel()], 1)
    bnd_ids = np.flatnonzero(mesh.edge_counts == 1)
    is_bnd = np.zeros(len(mesh.edges), bool)
    is_bnd[bnd_ids] = True
    directed = directed[is_bnd[mesh.elem_edges.ravel()]]
    nxt = dict(zip(directed[:, 0].tolist(), directed[:, 1].tolist()))
    start = int(directed[0, 0])
    loop = [start]
    while True:
        v = nxt[loop[-1]]
        if v == start:
            break
        loop.append(v)
        if len(loop) > len(directed):
            raise MeshError("boundary is not a single closed loop")
    return np.array(loop)


def load_mesh(path):
    """Read a mesh written by :func:`save_mesh` and rebuild its boundary polygon."""
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    try:
        nv, ne = int(lines[0][0]), int(lines[0][1])
        vrows = np.array(lines[1 : 1 + nv], dtype=float)
        trows = np.array(lines[1 + nv : 1 + nv + ne], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if vrows.shape != (nv, 4) or trows.shape != (ne, 4):
        raise MeshError(f"malformed mesh file {path}")
    vclass = vrows[:, 2].astype(np.int8)
    vcomp = vrows[:, 3].astype(np.int64)
    mesh = Mesh(vrows[:, :2], trows[:, :3], vclass=vclass, vcomp=vcomp, parent=trows[:, 3])
    if not np.any(vclass == CORNER):
        return mesh
    loop = boundary_loop(mesh)
    corner_ids = loop[vclass[loop] == CORNER]
    poly = Polygon(mesh.coords[corner_ids])
    # rotate the polygon so segment indices agree with stored component ids
    _, geo_comp = poly.classify(mesh.coords)
    edge_v = np.flatnonzero(vclass == EDGE)
    for shift in range(poly.n):
        if np.all((geo_comp[edge_v] + shift) % poly.n == vcomp[edge_v]):
            poly = Polygon(np.roll(poly.corners, shift, axis=0))
            break
    else:
        vcomp = np.where(vclass == EDGE, geo_comp, -1)
    return replace(mesh, vcomp=vcomp, boundary=poly)
