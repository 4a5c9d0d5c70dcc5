import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hradapt import features as F
from hradapt.fem import ProblemInstance
from hradapt.mesh import Mesh, uniform_refine

from conftest import random_mesh, single_triangle, two_triangle_square


def brute_adjacency(mesh):
    A = np.zeros((mesh.n_vertices, mesh.n_vertices))
    for tri in mesh.tris:
        for a in tri:
            for b in tri:
                if a != b:
                    A[a, b] = 1.0
    return A


def test_single_triangle_structure():
    H, A, (vdeg, edeg) = F.build_structure(single_triangle())
    assert np.array_equal(H.toarray(), np.ones((3, 1)))
    assert np.array_equal(A.toarray(), np.ones((3, 3)) - np.eye(3))
    assert np.array_equal(edeg, [3.0])


def test_two_triangles_shared_degree():
    m = two_triangle_square()
    _, _, (vdeg, _) = F.build_structure(m)
    shared = np.intersect1d(m.tris[0], m.tris[1])
    assert np.all(vdeg[shared] == 2)
    assert np.all(vdeg[np.setdiff1d(np.arange(4), shared)] == 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_structure_matches_brute_force(seed):
    m = random_mesh(seed, 1)
    H, A, (vdeg, edeg) = F.build_structure(m)
    assert np.array_equal(A.toarray(), brute_adjacency(m))
    assert np.all(np.asarray(H.sum(axis=0)).ravel() == 3)
    assert np.all(edeg == 3) and np.all(vdeg >= 1)
    assert F.build_structure(uniform_refine(m, 1))[0].shape[1] == 4 * m.n_elements


def test_vertex_features_basic():
    m = random_mesh(1, 1)
    vf = F.vertex_features(m, np.zeros(m.n_vertices))
    assert vf.shape == (m.n_vertices, F.VERTEX_DIM)
    assert np.all(vf[:, 2] == 0)
    corners = np.flatnonzero(m.vclass == 2)
    assert np.all(vf[corners, 3:] == [0, 0, 1])
    shift = np.array([0.3, -1.2])
    moved = Mesh(m.coords + shift, m.tris, m.vclass, m.vcomp)
    u = np.arange(m.n_vertices, dtype=float)
    a, b = F.vertex_features(m, u), F.vertex_features(moved, u)
    assert np.allclose(b[:, :2] - a[:, :2], shift, atol=1e-14)
    assert np.array_equal(a[:, 2:], b[:, 2:])


def test_element_features_constant_field():
    m = random_mesh(2, 1)
    ef = F.element_features(m, np.full(m.n_vertices, 2.5), 3, 0.01)
    assert ef.shape == (m.n_elements, F.ELEMENT_BASE_DIM)
    idx = {c: i for i, c in enumerate(F.ELEMENT_COLUMNS)}
    for c in ("u_std", "grad_norm", "g_max", "g_std", "align"):
        assert np.all(ef[:, idx[c]] == 0), c
    assert np.all(ef[:, idx["step"]] == 3) and np.all(ef[:, idx["alpha"]] == 0.01)
    assert np.allclose(ef[:, idx["area"]], m.areas)


def test_element_features_linear_field_brute_force():
    m = random_mesh(3, 1)
    u = m.coords[:, 0].copy()
    ef = F.element_features(m, u, 0, 0.0)
    idx = {c: i for i, c in enumerate(F.ELEMENT_COLUMNS)}
    assert np.allclose(ef[:, idx["grad_norm"]], 1.0, atol=1e-12)
    for e, tri in enumerate(m.tris):
        j = []
        for a in range(3):
            p, q = tri[a], tri[(a + 1) % 3]
            j.append(abs(u[q] - u[p]) / np.hypot(*(m.coords[q] - m.coords[p])))
        assert ef[e, idx["g_max"]] == pytest.approx(max(j), rel=1e-12)
        assert ef[e, idx["g_std"]] == pytest.approx(np.std(j), rel=1e-12, abs=1e-15)


def test_equilateral_features():
    m = single_triangle(((0.0, 0.0), (1.0, 0.0), (0.5, np.sqrt(3) / 2)))
    ef = F.element_features(m, np.zeros(3), 0, 0.0)
    idx = {c: i for i, c in enumerate(F.ELEMENT_COLUMNS)}
    assert ef[0, idx["aspect"]] == pytest.approx(1.0, abs=1e-12)
    assert ef[0, idx["sin_theta"]] ** 2 + ef[0, idx["cos_theta"]] ** 2 == pytest.approx(1.0, abs=1e-14)


def test_task_width():
    m = random_mesh(0, 0)
    poly = m.boundary.corners.tolist()
    p = ProblemInstance("poisson", "unit_square", poly, 0, means=[[0.5, 0.5]], covs=[[[1e-3, 0], [0, 1e-3]]], weights=[1.0])
    h = ProblemInstance("heat", "unit_square", poly, 0, p0=[0.2, 0.2], p1=[0.8, 0.8])
    u = np.zeros(m.n_vertices)
    assert F.build_state(m, u, 0, 0.0, p).elem_feats.shape[1] == 13
    st_h = F.build_state(m, u, 0, 0.0, h)
    assert st_h.elem_feats.shape[1] == 14
    assert np.allclose(st_h.elem_feats[:, 12], np.linalg.norm(m.centroids - [0.2, 0.2], axis=1))


def test_gradient_linear_and_constant():
    m = random_mesh(4, 1)
    g = F.gradient_per_element(m, 3 * m.coords[:, 0] - 2 * m.coords[:, 1] + 7)
    assert np.allclose(g, [3.0, -2.0], atol=1e-11)
    assert np.all(F.gradient_per_element(m, np.full(m.n_vertices, 4.0)) == 0)


def test_gradient_matches_finite_difference():
    m = random_mesh(5, 1)
    from hradapt.fem import interpolate_at

    u = np.random.default_rng(0).normal(size=m.n_vertices)
    g = F.gradient_per_element(m, u)
    h = 1e-6
    for e in range(0, m.n_elements, 3):
        c = m.centroids[e]
        pts = np.array([c + [h, 0], c - [h, 0], c + [0, h], c - [0, h]])
        els = np.full(4, e)
        v = interpolate_at(m, u, pts, els)
        fd = np.array([(v[0] - v[1]) / (2 * h), (v[2] - v[3]) / (2 * h)])
        assert np.allclose(fd, g[e], atol=1e-8 * max(1, np.abs(g[e]).max()))


def test_edge_jump_right_triangle():
    m = single_triangle()
    u = m.coords[:, 0].copy()
    jumps = np.array([1.0, 1.0 / np.sqrt(2), 0.0])
    gmax, gstd = F.edge_jump_stats(m, u, 0)
    assert gmax == pytest.approx(1.0, rel=1e-15)
    assert gstd == pytest.approx(np.std(jumps), rel=1e-14)
    assert F.edge_jump_stats(m, np.full(3, 5.0), 0) == (0.0, 0.0)
    g2 = F.edge_jump_stats(m, -3.5 * u, 0)
    assert g2[0] == pytest.approx(3.5 * gmax) and g2[1] == pytest.approx(3.5 * gstd)


def test_alignment_cases():
    from hradapt.mesh import principal_orientations

    m = single_triangle(((0.0, 0.0), (4.0, 0.3), (2.0, 0.9)))
    th = principal_orientations(m)[0]
    along = np.cos(th) * m.coords[:, 0] + np.sin(th) * m.coords[:, 1]
    across = -np.sin(th) * m.coords[:, 0] + np.cos(th) * m.coords[:, 1]
    assert F.alignment(m, along, 0) == pytest.approx(1.0, abs=1e-12)
    assert F.alignment(m, -along, 0) == pytest.approx(-1.0, abs=1e-12)
    assert F.alignment(m, across, 0) == pytest.approx(0.0, abs=1e-12)
    assert F.alignment(m, np.ones(3), 0) == 0.0


def test_permutation_equivariance():
    m = random_mesh(6, 1)
    rng = np.random.default_rng(1)
    u = rng.normal(size=m.n_vertices)
    pv = rng.permutation(m.n_vertices)
    pe = rng.permutation(m.n_elements)
    inv = np.argsort(pv)
    m2 = Mesh(m.coords[pv], inv[m.tris][pe], m.vclass[pv], m.vcomp[pv])
    u2 = u[pv]
    assert np.allclose(F.vertex_features(m2, u2), F.vertex_features(m, u)[pv])
    assert np.allclose(F.element_features(m2, u2, 1, 0.1), F.element_features(m, u, 1, 0.1)[pe], atol=1e-12)


def test_state_finite_and_deterministic(tmp_path):
    m = random_mesh(7, 1)
    u = np.random.default_rng(0).normal(size=m.n_vertices)
    a = F.build_state(m, u, 2, 0.005)
    b = F.build_state(m, u, 2, 0.005)
    assert np.array_equal(a.elem_feats, b.elem_feats) and np.array_equal(a.vertex_feats, b.vertex_feats)
    assert np.all(np.isfinite(a.elem_feats))
    F.dump_features_csv(a, str(tmp_path / "s"))
    back = np.loadtxt(tmp_path / "s_element.csv", delimiter=",", skiprows=1)
    assert np.array_equal(back, a.elem_feats)
