import numpy as np
import pytest

from hradapt.domains import generate_domain
from hradapt.mesh import Mesh, classify_boundary, rgb_refine


def two_triangle_square():
    return generate_domain("unit_square", 2, 0)


def random_mesh(seed, refine_steps=1, p=0.3):
    """Coarse domain mesh plus a few random RGB refinements."""
    rng = np.random.default_rng(seed)
    kind = ("unit_square", "l_shape", "convex_polygon")[seed % 3]
    m = generate_domain(kind, int(rng.integers(15, 35)), seed)
    for _ in range(refine_steps):
        m, _ = rgb_refine(m, rng.random(m.n_elements) < p)
    return m


@pytest.fixture
def square2():
    return two_triangle_square()


def single_triangle(pts=((0.0, 0.0), (1.0, 0.0), (0.0, 1.0))):
    m = Mesh(np.array(pts, float), [[0, 1, 2]])
    return classify_boundary(m, np.array(pts, float))
