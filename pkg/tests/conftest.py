import numpy as np
import pytest

from tvafem.mesh import Triangulation, rgb_refine, uniform_triangulation


def random_mesh(rng, dim=2, max_elements=200, dirichlet=True):
    """Perturbed structured mesh, optionally locally refined."""
    n = int(rng.integers(1, 4 if dim == 3 else 6))
    box = [(0.0, 1.0 + rng.random()) for _ in range(dim)]
    mesh = uniform_triangulation(box, n, dirichlet=dirichlet)
    if dim == 2:
        while mesh.n_elements < max_elements // 4 and rng.random() < 0.7:
            marked = rng.choice(mesh.n_elements, size=max(1, mesh.n_elements // 4), replace=False)
            mesh = rgb_refine(mesh, marked)
    # jiggle interior vertices by a fraction of the local size
    V = mesh.vertices.copy()
    interior = np.ones(len(V), dtype=bool)
    interior[mesh.boundary_vertices] = False
    h = mesh.diameters.min()
    V[interior] += 0.15 * h * (rng.random((interior.sum(), dim)) - 0.5)
    return Triangulation(V, mesh.elements, boundary_tag=mesh.boundary_tag)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def square2():
    """Unit square split into two triangles."""
    return uniform_triangulation([(0, 1), (0, 1)], 1)


@pytest.fixture
def grid32():
    return uniform_triangulation([(-1, 1), (-1, 1)], 4)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def report(request):
    """Record one ``PASS/FAIL criterion ...`` line, echoed in the terminal summary."""
    def add(key, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {key}: {detail}"
        request.config._acceptance_lines.append(line)
        print(line)
        return ok
    return add


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
