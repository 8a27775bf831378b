"""Dual reconstruction, dual energies and the primal-dual gap estimator for ROF.

For a CR function ``v`` and an RT0 field ``y`` with ``|y| <= 1`` the gap

    eta^2(v, y) = ||grad_h v||_1 + ||[v]||_1 - (grad_h v, Pi y)
                  + 1/(2 alpha) ||div y - alpha (v - g)||^2

equals ``I(v) - D(y)`` and bounds the error quantity
``alpha/2 ||v - u||^2 + 1/(2 alpha) ||div y - div z||^2`` from above.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convex import feps_conjugate, feps_weight
from .fem import (CrFunction, P0Function, RtField, cr_eval, cr_gradient, cr_side_jumps, p0_project,
                  quad_points, rt_coefficients, rt_divergence, rt_eval, rt_from_affine, rt_linf_norm)
from .mesh import NEUMANN
from .rof import RofProblem, energy_reg

ADMISSIBILITY_TOL = 1e-12


@dataclass
class DualReport:
    z_raw: RtField
    z_admissible: RtField
    linf_raw: float
    duality_gap: float
    primal_energy: float
    dual_energy: float
    flux_mismatch: float
    pi_margin: float


@dataclass
class EstimatorReport:
    eta_sq_global: float
    eta_sq_local: np.ndarray
    tv_term: float
    coupling_term: float
    fidelity_term: float
    admissibility_violation: float
    jump_term: float = 0.0


def marini_fields(problem: RofProblem, u):
    """Element-wise affine coefficients of the reconstructed flux.

    Returns ``a`` (M, d) and ``b`` (M,) with ``z|_T = a_T + b_T (x - x_T)``.
    """
    mesh = problem.mesh
    grad = cr_gradient(u).values
    w = feps_weight(problem.eps_field.values, np.linalg.norm(grad, axis=1))
    a = w[:, None] * grad
    b = problem.alpha * (p0_project(u).values - problem.g_h.values) / mesh.dim
    return a, b


def marini_rof(problem: RofProblem, u: CrFunction, return_mismatch=False):
    """Flux reconstruction from a discrete primal iterate.

    The element fields ``w_T grad u_T + alpha (Pi u - g_h)_T / d (x - x_T)``
    are turned into one RT0 field by averaging the two one-sided fluxes of
    every interior side; fluxes through non-Dirichlet boundary sides are set
    to zero. At an exact discrete minimizer nothing changes.

    Returns
    -------
    z : RtField
    mismatch : ndarray, only if ``return_mismatch``
        One-sided flux disagreement per side before the repair.
    """
    mesh = problem.mesh
    a, b = marini_fields(problem, u)
    z, mismatch = rt_from_affine(mesh, a, b, average=True)
    neu = mesh.boundary_tag == NEUMANN
    if neu.any():
        mismatch = mismatch.copy()
        mismatch[neu] = np.abs(z.dofs[neu])
        z.dofs[neu] = 0.0
    return (z, mismatch) if return_mismatch else z


def scale_to_ball(z: RtField) -> RtField:
    """``z / max(1, ||z||_inf)``."""
    return RtField(z.mesh, z.dofs / max(1.0, rt_linf_norm(z)))


def dual_energy_reg(problem: RofProblem, y: RtField) -> float:
    """Regularized discrete dual energy; ``-inf`` if ``|Pi y| > 1 - eps`` somewhere."""
    mesh = problem.mesh
    a, _ = rt_coefficients(y)
    s = np.linalg.norm(a, axis=1)
    eps = problem.eps_field.values
    if np.any(s > 1 - eps):
        return -np.inf
    div = rt_divergence(y).values
    g = problem.g_h.values
    al = problem.alpha
    vol = mesh.volumes
    return float(-vol @ feps_conjugate(eps, s) - vol @ (div + al * g) ** 2 / (2 * al)
                 + 0.5 * al * vol @ g ** 2)


def dual_energy_unreg(problem: RofProblem, y: RtField) -> float:
    """Discrete dual energy with the constraint ``|Pi y| <= 1``."""
    mesh = problem.mesh
    a, _ = rt_coefficients(y)
    if np.any(np.linalg.norm(a, axis=1) > 1 + ADMISSIBILITY_TOL):
        return -np.inf
    div = rt_divergence(y).values
    g = problem.g_h.values
    al = problem.alpha
    vol = mesh.volumes
    return float(-vol @ (div + al * g) ** 2 / (2 * al) + 0.5 * al * vol @ g ** 2)


def _g_at(problem, x, use_exact_g, elements_shape):
    """Data at quadrature points, either pointwise or element means."""
    if use_exact_g:
        return np.asarray(problem.g_exact(x.reshape(-1, problem.mesh.dim)), dtype=float).reshape(elements_shape)
    return np.broadcast_to(problem.g_h.values[:, None], elements_shape)


def _resolve_g(problem, use_exact_g):
    if use_exact_g is None:
        return problem.g_exact is not None
    if use_exact_g and problem.g_exact is None:
        raise ValueError("problem has no pointwise data")
    return bool(use_exact_g)


def _quad(problem, use_exact_g):
    # with element-constant data every integrand is at most quadratic
    if use_exact_g:
        return problem.quad_order, problem.quad_subdivide
    return 2, 0


def primal_energy_unreg(problem: RofProblem, v: CrFunction, use_exact_g=None) -> float:
    """``|D v|(Omega) + alpha/2 ||v - g||^2`` for a CR function."""
    from .fem import tv_cr
    ex = _resolve_g(problem, use_exact_g)
    order, sub = _quad(problem, ex)
    x, w, lam = quad_points(problem.mesh, order, sub)
    vals = cr_eval(v, lam)
    g = _g_at(problem, x, ex, vals.shape)
    return float(tv_cr(v) + 0.5 * problem.alpha * ((vals - g) ** 2 * w).sum())


def dual_energy_cont(problem: RofProblem, y: RtField, use_exact_g=None) -> float:
    """``-I(|y| <= 1) - 1/(2 alpha) ||div y + alpha g||^2 + alpha/2 ||g||^2``."""
    ex = _resolve_g(problem, use_exact_g)
    if rt_linf_norm(y) > 1 + ADMISSIBILITY_TOL:
        return -np.inf
    order, sub = _quad(problem, ex)
    x, w, _ = quad_points(problem.mesh, order, sub)
    g = _g_at(problem, x, ex, w.shape)
    div = rt_divergence(y).values[:, None]
    al = problem.alpha
    return float((-(div + al * g) ** 2 / (2 * al) * w).sum() + 0.5 * al * (g ** 2 * w).sum())


def eta_cr(problem: RofProblem, v: CrFunction, y: RtField, use_exact_g=None) -> EstimatorReport:
    """Primal-dual gap estimator and its element-wise split.

    Interior jump integrals are shared equally by the two neighbours;
    Dirichlet boundary traces belong to their element. If ``y`` is not in
    the unit ball the global value is ``+inf``.

    Parameters
    ----------
    use_exact_g : bool, optional
        Use the pointwise data in the fidelity term (default: whenever the
        problem has it).
    """
    mesh = problem.mesh
    ex = _resolve_g(problem, use_exact_g)
    vol = mesh.volumes
    grad = cr_gradient(v).values
    tv_el = vol * np.linalg.norm(grad, axis=1)
    jumps = cr_side_jumps(v, include_dirichlet_boundary=True)
    share = np.where(mesh.side_elements[:, 1] >= 0, 0.5, 1.0) * jumps
    jump_el = share[mesh.element_sides].sum(axis=1)
    a, _ = rt_coefficients(y)
    coup_el = -vol * np.einsum("md,md->m", grad, a)
    order, sub = _quad(problem, ex)
    x, w, lam = quad_points(mesh, order, sub)
    vals = cr_eval(v, lam)
    g = _g_at(problem, x, ex, vals.shape)
    div = rt_divergence(y).values[:, None]
    fid_el = ((div - problem.alpha * (vals - g)) ** 2 * w).sum(axis=1) / (2 * problem.alpha)
    local = tv_el + jump_el + coup_el + fid_el
    viol = max(0.0, rt_linf_norm(y) - 1.0)
    total = float(local.sum()) if viol <= ADMISSIBILITY_TOL else np.inf
    return EstimatorReport(total, local, float(tv_el.sum() + jumps.sum()), float(coup_el.sum()),
                           float(fid_el.sum()), viol, float(jumps.sum()))


def eta_w11(problem: RofProblem, v, grad_v, y: RtField, order=None, subdivide=None) -> float:
    """Gap estimator for a smooth primal candidate given by callbacks.

    Parameters
    ----------
    v, grad_v : callable
        ``x (n, d) -> (n,)`` and ``x (n, d) -> (n, d)``.
    """
    mesh = problem.mesh
    order = problem.quad_order if order is None else order
    sub = problem.quad_subdivide if subdivide is None else subdivide
    x, w, lam = quad_points(mesh, order, sub)
    pts = x.reshape(-1, mesh.dim)
    vv = np.asarray(v(pts), dtype=float).reshape(w.shape)
    gv = np.asarray(grad_v(pts), dtype=float).reshape(*w.shape, mesh.dim)
    yv = rt_eval(y, lam)
    g = _g_at(problem, x, problem.g_exact is not None, w.shape)
    div = rt_divergence(y).values[:, None]
    integrand = (np.linalg.norm(gv, axis=2) - np.einsum("mqd,mqd->mq", gv, yv)
                 + (div - problem.alpha * (vv - g)) ** 2 / (2 * problem.alpha))
    return float((integrand * w).sum())


def rho_tilde_sq(problem: RofProblem, v: CrFunction, y: RtField, exact, order=None, subdivide=None) -> float:
    """``alpha/2 ||v - u||^2 + 1/(2 alpha) ||div y - div z||^2`` against an exact pair."""
    mesh = problem.mesh
    order = problem.quad_order if order is None else order
    sub = problem.quad_subdivide if subdivide is None else subdivide
    x, w, lam = quad_points(mesh, order, sub)
    pts = x.reshape(-1, mesh.dim)
    vals = cr_eval(v, lam)
    u = np.asarray(exact.u(pts), dtype=float).reshape(w.shape)
    dz = np.asarray(exact.div_z(pts), dtype=float).reshape(w.shape)
    div = rt_divergence(y).values[:, None]
    al = problem.alpha
    return float((0.5 * al * (vals - u) ** 2 * w).sum() + ((div - dz) ** 2 * w).sum() / (2 * al))


def rho_tilde(problem, v, y, exact, order=None, subdivide=None) -> float:
    """Square root of :func:`rho_tilde_sq`."""
    return float(np.sqrt(rho_tilde_sq(problem, v, y, exact, order, subdivide)))


def pi_margin(problem: RofProblem, z: RtField) -> float:
    """``max_T (|Pi z|_T - (1 - eps_T))``; non-positive when ``Pi z`` is admissible."""
    a, _ = rt_coefficients(z)
    return float(np.max(np.linalg.norm(a, axis=1) - (1 - problem.eps_field.values)))


def dual_report(problem: RofProblem, u: CrFunction) -> DualReport:
    """Reconstruct, scale and evaluate the discrete dual field."""
    z, mismatch = marini_rof(problem, u, return_mismatch=True)
    linf = rt_linf_norm(z)
    zbar = RtField(z.mesh, z.dofs / max(1.0, linf))
    p = energy_reg(problem, u)
    dd = dual_energy_reg(problem, z)
    return DualReport(z, zbar, linf, p - dd, p, dd,
                      float(mismatch.max()) if mismatch.size else 0.0, pi_margin(problem, z))
