"""
Coarse mesh generation for the polygonal domains used in experiments.

Meshes are built from boundary samples plus a jittered interior lattice
and triangulated with :class:`scipy.spatial.Delaunay`.  Interior points
are kept at least ``0.6 h`` away from the boundary, which keeps every
boundary sample segment's diametral circle empty, so the Delaunay
triangulation contains the boundary segments.  Triangles outside a
non-convex domain are dropped by a centroid test.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull, Delaunay

from .mesh import Mesh, MeshError, Polygon, classify_boundary

KINDS = ("unit_square", "l_shape", "convex_polygon")


def l_shape_polygon(p0):
    """Unit square minus the quadrant ``[p0x, 1) x [p0y, 1)``."""
    px, py = float(p0[0]), float(p0[1])
    if not (0.0 < px < 1.0 and 0.0 < py < 1.0):
        raise MeshError("L-shape corner must lie strictly inside the unit square")
    return Polygon([(0, 0), (1, 0), (1, py), (px, py), (px, 1), (0, 1)])


def convex_polygon(rng, n_points=10, jitter=0.2):
    """Convex hull of jittered points on a circle, rescaled into the unit square."""
    ang = 2 * np.pi * np.arange(n_points) / n_points
    pts = 0.5 + 0.4 * np.stack([np.cos(ang), np.sin(ang)], 1)
    pts = pts + rng.uniform(-jitter, jitter, size=pts.shape)
    hull = ConvexHull(pts)
    corners = pts[hull.vertices]
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    corners = (corners - lo) / (hi - lo)
    # drop nearly collinear corners so every component has a clear direction
    keep = []
    n = len(corners)
    for i in range(n):
        a, b, c = corners[i - 1], corners[i], corners[(i + 1) % n]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross > 1e-6:
            keep.append(i)
    return Polygon(corners[keep])


def domain_polygon(kind, rng=None, p0=None):
    rng = np.random.default_rng(rng)
    if kind == "unit_square":
        return Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
    if kind == "l_shape":
        if p0 is None:
            p0 = rng.uniform(0.2, 0.95, size=2)
        return l_shape_polygon(p0)
    if kind == "convex_polygon":
        return convex_polygon(rng)
    raise MeshError(f"unknown domain kind {kind!r}")


def _boundary_points(poly, h):
    pts = []
    for a, b in zip(poly.starts, poly.ends):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / h - 1e-9)))
        t = np.arange(n) / n
        pts.append(a[None] + t[:, None] * (b - a)[None])
    return np.vstack(pts)


def triangulate(poly, h, rng):
    """Triangulate ``poly`` with target spacing ``h``."""
    bpts = _boundary_points(poly, h)
    lo, hi = poly.corners.min(axis=0), poly.corners.max(axis=0)
    gx = np.arange(lo[0] + h / 2, hi[0], h)
    gy = np.arange(lo[1] + h / 2, hi[1], h)
    grid = np.stack(np.meshgrid(gx, gy, indexing="ij"), -1).reshape(-1, 2)
    if len(grid):
        grid = grid + rng.uniform(-0.2 * h, 0.2 * h, size=grid.shape)
        inside = poly.contains(grid, tol=0.0)
        far = poly.segment_distances(grid).min(axis=1) > 0.6 * h
        grid = grid[inside & far]
    pts = np.vstack([bpts, grid]) if len(grid) else bpts
    tri = Delaunay(pts)
    tris = tri.simplices.astype(np.int64)
    z = pts[tris]
    det = (z[:, 1, 0] - z[:, 0, 0]) * (z[:, 2, 1] - z[:, 0, 1]) - (z[:, 1, 1] - z[:, 0, 1]) * (
        z[:, 2, 0] - z[:, 0, 0]
    )
    tris[det < 0] = tris[det < 0][:, [0, 2, 1]]
    keep = (np.abs(det) > 1e-12) & poly.contains(z.mean(axis=1), tol=0.0)
    tris = tris[keep]
    used = np.unique(tris)
    remap = np.full(len(pts), -1)
    remap[used] = np.arange(len(used))
    return Mesh(pts[used], remap[tris])


def _valid(mesh, poly):
    if not mesh.is_conforming():
        return False
    if abs(mesh.areas.sum() - poly.area) > 1e-9:
        return False
    if np.any(mesh.dets <= 0):
        return False
    return True


def mesh_polygon(poly, target_elements, rng, max_tries=40):
    """Mesh ``poly`` with roughly ``target_elements`` triangles."""
    h = np.sqrt(2.0 * poly.area / max(target_elements, 1))
    best = None
    for _ in range(max_tries):
        cand = triangulate(poly, h, rng)
        try:
            cand = classify_boundary(cand, poly) if _valid(cand, poly) else None
        except MeshError:
            cand = None
        if cand is not None:
            if best is None or abs(cand.n_elements - target_elements) < abs(best.n_elements - target_elements):
                best = cand
            if abs(cand.n_elements - target_elements) <= max(2, 0.15 * target_elements):
                return cand
            h *= np.sqrt(cand.n_elements / target_elements) ** 0.5
        else:
            h *= 0.97
    if best is None:
        raise MeshError("infeasible geometry: no valid triangulation found")
    return best


def generate_domain(kind, target_elements=30, seed=0, p0=None, polygon=None):
    """Coarse conforming mesh of one of the supported domains.

    Parameters
    ----------
    kind : {'unit_square', 'l_shape', 'convex_polygon'}
    target_elements : int
        Approximate element count of the coarse mesh.  ``unit_square`` with
        ``target_elements <= 2`` yields the two-triangle diagonal split.
    seed : int
        Seeds the domain shape (when sampled) and the interior jitter.
    p0 : array-like, optional
        Inner corner of the L-shape; sampled from ``U(0.2, 0.95)^2`` if omitted.
    polygon : Polygon or array, optional
        Explicit boundary, overriding ``kind``.
    """
    rng = np.random.default_rng(seed)
    if polygon is not None:
        poly = polygon if isinstance(polygon, Polygon) else Polygon(np.asarray(polygon, float))
    else:
        poly = domain_polygon(kind, rng, p0)
    if kind == "unit_square" and polygon is None and target_elements <= 2:
        mesh = Mesh(poly.corners, [[0, 1, 2], [0, 2, 3]])
        return classify_boundary(mesh, poly)
    return mesh_polygon(poly, target_elements, rng)
