from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_mesh
from tvafem.fem import (CrFunction, P0Function, RtField, _abs_affine_simplex, assemble_cr_mass,
                        assemble_pi_mass, assemble_weighted_stiffness, boundary_interpolant,
                        cr_eval, cr_gradient, cr_interpolate, cr_jump_l1, cr_local_mass,
                        cr_side_jumps, free_dofs, p0_project, quad_l2_element, quad_points,
                        quadrature_rule, rt_divergence, rt_eval, rt_interpolate, rt_linf_norm,
                        tv_cr, vanishes_on_dirichlet_boundary)
from tvafem.mesh import Triangulation, uniform_triangulation

REF2 = np.array([[0, 0], [1, 0], [0, 1.0]])
REF3 = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])


def monomial_integral(exps):
    """Integral of prod x_i^a_i over the reference simplex."""
    d = len(exps)
    return np.prod([factorial(a) for a in exps]) / factorial(sum(exps) + d)


def local_basis_oracle(mesh, T, x):
    """CR basis values at points x (n, d) via an explicit affine solve."""
    P = mesh.vertices[mesh.elements[T]]
    d = mesh.dim
    mids = np.array([np.delete(P, j, axis=0).mean(axis=0) for j in range(d + 1)])
    A = np.column_stack([np.ones(d + 1), mids])
    coef = np.linalg.solve(A, np.eye(d + 1))              # column j: phi_j
    return np.column_stack([np.ones(len(x)), x]) @ coef


# ---------------------------------------------------------------- quadrature

@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("order", [1, 2, 3, 4, 5])
def test_quadrature_exactness(dim, order):
    lam, w = quadrature_rule(dim, order)
    assert np.isclose(w.sum(), 1.0)
    x = lam[:, 1:]
    for total in range(order + 1):
        for exps in np.ndindex(*(total + 1,) * dim):
            if sum(exps) != total:
                continue
            val = np.prod(x ** np.array(exps), axis=1) @ w / factorial(dim)
            assert abs(val - monomial_integral(exps)) <= 1e-13


def test_composite_rule_matches():
    lam, w = quadrature_rule(2, 3, subdivide=2)
    x = lam[:, 1:]
    assert np.isclose((x[:, 0] ** 3 * x[:, 1]) @ w / 2, monomial_integral((3, 1)), atol=1e-14)


def test_quad_l2_element():
    assert np.isclose(quad_l2_element(REF2, lambda x: np.ones(len(x)), 1), 0.5)
    assert np.isclose(quad_l2_element(REF2, lambda x: x[:, 0] ** 2, 2), 1 / 12, atol=1e-15)
    f = lambda x: 3 * x[:, 0] ** 4 - 2 * x[:, 0] ** 2 * x[:, 1] ** 2 + x[:, 1] ** 3 + 1
    ref = 3 * monomial_integral((4, 0)) - 2 * monomial_integral((2, 2)) + monomial_integral((0, 3)) + 0.5
    assert abs(quad_l2_element(REF2, f, 5) - ref) <= 1e-13
    T = np.array([[0.3, 0.1], [2.0, 0.4], [0.7, 1.9]])
    area = abs(np.linalg.det(T[1:] - T[0])) / 2
    assert np.isclose(quad_l2_element(T, lambda x: np.ones(len(x))), area)
    with pytest.raises(ValueError):
        quad_l2_element(REF2, lambda x: x[:, 0], 7)


# ---------------------------------------------------------------- CR

def test_cr_gradient_constant_and_linear(rng):
    for dim in (2, 3):
        m = random_mesh(rng, dim)
        assert np.allclose(cr_gradient(CrFunction(m, np.ones(m.n_sides))).values, 0, atol=1e-12)
        g = cr_gradient(cr_interpolate(m, lambda x: x[:, 0])).values
        e = np.zeros(dim)
        e[0] = 1
        assert np.allclose(g, e, atol=1e-12)


def test_cr_gradient_against_pointwise_oracle(square2, rng):
    v = CrFunction(square2, rng.normal(size=square2.n_sides))
    g = cr_gradient(v).values
    h = 1e-6
    for T in range(2):
        x0 = square2.barycenters[T]
        loc = v.dofs[square2.element_sides[T]]
        val = lambda x: local_basis_oracle(square2, T, x) @ loc
        fd = [(val(x0 + h * e) - val(x0 - h * e))[0] / (2 * h) for e in np.eye(2)[:, None, :]]
        assert np.allclose(g[T], fd, atol=1e-9)


def test_cr_eval_matches_basis_oracle(rng):
    m = random_mesh(rng, 2)
    v = CrFunction(m, rng.normal(size=m.n_sides))
    x, _, lam = quad_points(m, 3)
    vals = cr_eval(v, lam)
    for T in range(0, m.n_elements, 7):
        ref = local_basis_oracle(m, T, x[T]) @ v.dofs[m.element_sides[T]]
        assert np.allclose(vals[T], ref, atol=1e-12)


def test_abs_affine_integrals():
    # |s| on the unit segment with endpoint values 0 and 1
    assert np.isclose(_abs_affine_simplex(np.array([[0.0, 1.0]]), np.array([1.0]))[0], 0.5)
    assert np.isclose(_abs_affine_simplex(np.array([[-1.0, 1.0]]), np.array([1.0]))[0], 0.5)
    # sign change inside a triangle; oracle by fine sampling
    vals = np.array([[1.0, -2.0, 0.5]])
    lam, w = quadrature_rule(2, 1, subdivide=6)
    ref = np.abs(lam @ vals[0]) @ w
    assert np.isclose(_abs_affine_simplex(vals, np.array([1.0]))[0], ref, rtol=1e-3)


def test_jump_of_constant(grid32):
    v = CrFunction(grid32, 2.5 * np.ones(grid32.n_sides))
    assert np.isclose(cr_jump_l1(v, True), 2.5 * 8.0)
    assert abs(cr_jump_l1(v, False)) <= 1e-13


def test_conforming_function_has_no_interior_jumps(rng):
    for dim in (2, 3):
        m = random_mesh(rng, dim)
        v = cr_interpolate(m, lambda x: 1 + x @ np.arange(1.0, dim + 1))
        assert cr_jump_l1(v, False) <= 1e-13


def test_engineered_jump():
    # two triangles sharing the unit side from (0,0) to (0,1)
    V = np.array([[0, 0], [0, 1], [1, 0], [-1, 0.0]])
    m = Triangulation(V, [[0, 2, 1], [0, 1, 3]])
    f_right = lambda x: x[:, 1] - 0.5          # trace s - 1/2 on the shared side
    dofs = np.zeros(m.n_sides)
    right = 0 if m.barycenters[0, 0] > 0 else 1
    for j, S in enumerate(m.element_sides[right]):
        dofs[S] = f_right(m.side_midpoints[S][None])[0]
    v = CrFunction(m, dofs)
    jumps = cr_side_jumps(v, include_dirichlet_boundary=False)
    shared = np.flatnonzero(m.side_elements[:, 1] >= 0)[0]
    assert np.isclose(jumps[shared], 0.25, atol=1e-15)        # int_0^1 |s - 1/2| ds


def test_tv_of_linear_function():
    m = uniform_triangulation([(0, 1), (0, 1)], 5)
    assert tv_cr(CrFunction(m, np.zeros(m.n_sides))) == 0
    assert np.isclose(tv_cr(cr_interpolate(m, lambda x: x[:, 0]), include_dirichlet_boundary=False), 1.0)


def tv_oracle(v):
    """Per-element gradient mass plus sampled per-side jump integrals."""
    m = v.mesh
    total = 0.0
    for T in range(m.n_elements):
        P = m.vertices[m.elements[T]]
        coef = np.linalg.lstsq(np.column_stack([np.ones(3), m.side_midpoints[m.element_sides[T]]]),
                               v.dofs[m.element_sides[T]], rcond=None)[0]
        total += m.volumes[T] * np.linalg.norm(coef[1:])
    t = (np.arange(4000) + 0.5) / 4000
    for S in range(m.n_sides):
        a, b = m.vertices[m.sides[S]]
        pts = a + t[:, None] * (b - a)
        tr = []
        for T in m.side_elements[S]:
            if T < 0:
                continue
            coef = np.linalg.lstsq(np.column_stack([np.ones(3), m.side_midpoints[m.element_sides[T]]]),
                                   v.dofs[m.element_sides[T]], rcond=None)[0]
            tr.append(coef[0] + pts @ coef[1:])
        jump = tr[0] - tr[1] if len(tr) == 2 else tr[0]
        total += np.abs(jump).mean() * np.linalg.norm(b - a)
    return total


def test_tv_against_oracle(rng):
    m = uniform_triangulation([(0, 1), (0, 1)], 3)
    v = CrFunction(m, rng.normal(size=m.n_sides))
    grad_part = (m.volumes * np.linalg.norm(cr_gradient(v).values, axis=1)).sum()
    assert grad_part > 0 and cr_jump_l1(v) > 0
    assert np.isclose(tv_cr(v), tv_oracle(v), rtol=1e-6)


# ---------------------------------------------------------------- projections, boundary

def test_p0_project_cases(square2, rng):
    P = p0_project(lambda x: np.full(len(x), 3.0), square2)
    assert np.allclose(P.values, 3.0)
    v = CrFunction(square2, np.zeros(5))
    v.dofs[square2.element_sides[0]] = [0.0, 1.0, 2.0]
    assert np.isclose(p0_project(v).values[0], 1.0)
    m = random_mesh(rng, 2)
    for S in range(0, m.n_sides, 5):
        dofs = np.zeros(m.n_sides)
        dofs[S] = 1.0
        psi = RtField(m, dofs)
        ref = rt_eval(psi, np.full((1, 3), 1 / 3))[:, 0, :]
        assert np.allclose(p0_project(psi).values, ref, atol=1e-13)


def test_p0_project_callback_mean(grid32):
    P = p0_project(lambda x: x[:, 0] ** 2, grid32, order=2)
    ref = np.array([quad_l2_element(grid32.vertices[e], lambda x: x[:, 0] ** 2, 2) for e in grid32.elements])
    assert np.allclose(P.values * grid32.volumes, ref)


def test_boundary_interpolant(square2):
    v = CrFunction(square2, np.ones(5))
    out = boundary_interpolant(v)
    assert np.all(out.dofs == 0)           # every side of the square touches the boundary
    m = uniform_triangulation([(0, 1), (0, 1)], 4)
    v = CrFunction(m, np.arange(1.0, m.n_sides + 1))
    out = boundary_interpolant(v)
    bd = np.zeros(m.n_vertices, dtype=bool)
    bd[m.sides[m.dirichlet_sides].ravel()] = True
    touches = bd[m.sides].any(axis=1)
    assert np.all(out.dofs[touches] == 0) and np.all(out.dofs[~touches] == v.dofs[~touches])
    assert vanishes_on_dirichlet_boundary(out) and not vanishes_on_dirichlet_boundary(v)
    assert np.all(boundary_interpolant(CrFunction(m, np.zeros(m.n_sides))).dofs == 0)


# ---------------------------------------------------------------- RT

def test_rt_divergence_cases(rng):
    for dim in (2, 3):
        m = random_mesh(rng, dim)
        c = rng.normal(size=dim)
        assert np.allclose(rt_divergence(rt_interpolate(m, lambda x: np.tile(c, (len(x), 1)))).values, 0,
                           atol=1e-11)
        assert np.allclose(rt_divergence(rt_interpolate(m, lambda x: x)).values, dim)


def test_rt_divergence_gauss_oracle(rng):
    m = random_mesh(rng, 2)
    y = RtField(m, rng.normal(size=m.n_sides))
    div = rt_divergence(y).values
    for T in range(m.n_elements):
        P = m.vertices[m.elements[T]]
        flux = 0.0
        for j in range(3):
            lam = np.full((1, 3), 0.5)
            lam[0, j] = 0.0
            val = rt_eval(y, lam, elements=[T])[0, 0]
            a, b = np.delete(P, j, axis=0)
            n = np.array([b[1] - a[1], a[0] - b[0]])
            if n @ (a - P[j]) < 0:
                n = -n
            flux += val @ n                      # |n| = side length
        assert abs(flux / m.volumes[T] - div[T]) <= 1e-12 * max(1, abs(div[T]))


def test_rt_normal_continuity(rng):
    m = random_mesh(rng, 2)
    y = RtField(m, rng.normal(size=m.n_sides))
    for S in np.flatnonzero(m.side_elements[:, 1] >= 0)[:10]:
        n = m.side_normals[S]
        vals = []
        for T in m.side_elements[S]:
            j = list(m.element_sides[T]).index(S)
            lam = np.full((1, 3), 0.5)
            lam[0, j] = 0
            vals.append(rt_eval(y, lam, elements=[T])[0, 0] @ n)
        assert np.isclose(vals[0], vals[1]) and np.isclose(vals[0], y.dofs[S])


def test_rt_linf_norm(grid32):
    assert np.isclose(rt_linf_norm(rt_interpolate(grid32, lambda x: np.tile([0.3, 0.4], (len(x), 1)))), 0.5)
    assert np.isclose(rt_linf_norm(rt_interpolate(grid32, lambda x: x)), np.sqrt(2))
    assert rt_linf_norm(RtField(grid32, np.zeros(grid32.n_sides))) == 0


# ---------------------------------------------------------------- integration by parts

def test_discrete_integration_by_parts(rng):
    for k in range(20):
        m = random_mesh(rng, 2 if k % 5 else 3)
        v = CrFunction(m, rng.normal(size=m.n_sides))
        v.dofs[m.boundary_sides] = 0
        y = RtField(m, rng.normal(size=m.n_sides))
        lhs = m.volumes @ np.einsum("md,md->m", cr_gradient(v).values, p0_project(y).values)
        rhs = -m.volumes @ (p0_project(v).values * rt_divergence(y).values)
        assert abs(lhs - rhs) <= 1e-11 * max(1, abs(lhs))


def test_orthogonal_decomposition_ranks():
    """P0 vectors split into discrete gradients of CR_D and Pi of div-free RT fields."""
    m = uniform_triangulation([(0, 1), (0, 1)], 3)
    d, M = 2, m.n_elements
    free = free_dofs(m)
    Gcr = np.zeros((M * d, len(free)))
    for k, S in enumerate(free):
        e = np.zeros(m.n_sides)
        e[S] = 1
        Gcr[:, k] = cr_gradient(CrFunction(m, e)).values.ravel()
    B = np.zeros((M * d, m.n_sides))
    D = np.zeros((M, m.n_sides))
    for S in range(m.n_sides):
        e = np.zeros(m.n_sides)
        e[S] = 1
        B[:, S] = p0_project(RtField(m, e)).values.ravel()
        D[:, S] = rt_divergence(RtField(m, e)).values
    _, s, Vt = np.linalg.svd(D)
    ker = Vt[(s > 1e-10).sum():].T                     # basis of ker div
    W = B @ ker
    r1, r2 = np.linalg.matrix_rank(Gcr), np.linalg.matrix_rank(W)
    assert r1 + r2 == np.linalg.matrix_rank(np.hstack([Gcr, W]))
    assert np.allclose(Gcr.T @ (np.repeat(m.volumes, d)[:, None] * W), 0, atol=1e-12)
    assert r1 + r2 == M * d


# ---------------------------------------------------------------- assembly

def test_cr_mass(square2):
    Md = assemble_cr_mass(square2).toarray()
    diag_side = np.flatnonzero(square2.side_elements[:, 1] >= 0)[0]
    assert np.isclose(Md[diag_side, diag_side], 1 / 3)
    assert np.isclose(Md.sum(), 1.0)
    big = Triangulation(2 * square2.vertices, square2.elements)
    assert np.allclose(assemble_cr_mass(big).toarray(), 4 * Md)


@pytest.mark.parametrize("dim", [2, 3])
def test_cr_mass_against_quadrature(dim, rng):
    m = random_mesh(rng, dim)
    M = assemble_cr_mass(m).toarray()
    v = rng.normal(size=m.n_sides)
    _, w, lam = quad_points(m, 2)
    ref = (cr_eval(CrFunction(m, v), lam) ** 2 * w).sum()
    assert np.isclose(v @ M @ v, ref, rtol=1e-12)
    L = cr_local_mass(dim)
    assert np.isclose(L.sum(), 1.0)


def test_weighted_stiffness(rng):
    m = random_mesh(rng, 2)
    K0 = assemble_weighted_stiffness(m, np.zeros(m.n_elements)).toarray()
    assert np.all(K0 == 0)
    K = assemble_weighted_stiffness(m, np.ones(m.n_elements)).toarray()
    v = cr_interpolate(m, lambda x: x[:, 0]).dofs
    assert np.isclose(v @ K @ v, m.volumes.sum())
    assert np.allclose(K, K.T) and np.allclose(K @ np.ones(m.n_sides), 0, atol=1e-12)
    assert np.linalg.eigvalsh(K).min() > -1e-10
    with pytest.raises(ValueError):
        assemble_weighted_stiffness(m, -np.ones(m.n_elements))


def test_pi_mass(rng):
    one = uniform_triangulation([(0, 1), (0, 1)], 1)
    tri = Triangulation(REF2, [[0, 1, 2]])
    assert np.allclose(assemble_pi_mass(tri).toarray(), 0.5 / 9)
    m = random_mesh(rng, 2)
    Mp = assemble_pi_mass(m).toarray()
    v = rng.normal(size=m.n_sides)
    _, w, _ = quad_points(m, 1)
    ref = (p0_project(CrFunction(m, v)).values ** 2 * w[:, 0]).sum()
    assert np.isclose(v @ Mp @ v, ref, rtol=1e-12)
    assert np.isclose(np.ones(m.n_sides) @ Mp @ np.ones(m.n_sides), m.volumes.sum())
    assert one.n_elements == 2


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_affine_reproduction(seed):
    r = np.random.default_rng(seed)
    m = random_mesh(r, 2)
    c = r.normal(size=3)
    v = cr_interpolate(m, lambda x: c[0] + x @ c[1:])
    assert np.allclose(cr_gradient(v).values, c[1:], atol=1e-10)
    assert cr_jump_l1(v, include_dirichlet_boundary=False) <= 1e-12
