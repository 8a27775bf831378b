"""Convex-analysis building blocks.

The smoothed modulus ``f_eps(t) = (1 - eps) sqrt(t^2 + eps^2)``, its
derivative and Fenchel conjugate, smooth energy densities with their
conjugates, Bregman distances and the element-wise reconstruction formulas
that map a discrete primal solution to a discrete flux and back.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .fem import CrFunction, P0Function, P0Vector, RtField, rt_from_affine


@dataclass(frozen=True)
class Regularization:
    """Regularization parameter ``0 < eps < 1`` (scalar or per element)."""

    eps: float | np.ndarray

    def __post_init__(self):
        e = np.asarray(self.eps, dtype=float)
        if np.any(e <= 0) or np.any(e >= 1):
            raise ValueError("regularization parameter must lie in (0, 1)")


def _eps(reg):
    return np.asarray(reg.eps if isinstance(reg, Regularization) else reg, dtype=float)


def feps_eval(reg, t):
    """Value and derivative of ``f_eps`` at ``t``."""
    e = _eps(reg)
    t = np.asarray(t, dtype=float)
    root = np.sqrt(t * t + e * e)
    # |t| / root <= 1 analytically; clip the rounding excess
    return (1 - e) * root, (1 - e) * np.clip(t / root, -1.0, 1.0)


def feps_weight(reg, t):
    """``f_eps'(t) / t`` evaluated as ``(1 - eps) / sqrt(t^2 + eps^2)``, finite at 0."""
    e = _eps(reg)
    t = np.asarray(t, dtype=float)
    return (1 - e) / np.sqrt(t * t + e * e)


def feps_conjugate(reg, s):
    """Fenchel conjugate ``-eps sqrt((1-eps)^2 - s^2)``; ``+inf`` for ``|s| > 1 - eps``."""
    e = _eps(reg)
    s = np.asarray(s, dtype=float)
    gap = (1 - e) ** 2 - s * s
    out = np.where(np.abs(s) <= 1 - e, -e * np.sqrt(np.maximum(gap, 0.0)), np.inf)
    return out if out.ndim else float(out)


def legendre_transform(f, s, t_lo=-1e4, t_hi=1e4, iters=200):
    """Numerical ``sup_t (s t - f(t))`` for convex ``f`` by golden-section search."""
    invphi = (np.sqrt(5) - 1) / 2
    s = np.atleast_1d(np.asarray(s, dtype=float))
    a = np.full_like(s, t_lo)
    b = np.full_like(s, t_hi)
    obj = lambda t: s * t - f(t)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = obj(c), obj(d)
    for _ in range(iters):
        left = fc > fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - invphi * (b - a)
        d_new = a + invphi * (b - a)
        c, d = c_new, d_new
        fc, fd = obj(c), obj(d)
    return np.maximum(fc, fd)


@dataclass(frozen=True)
class SmoothDensity:
    """Convex C^1 energy density on R^d with its conjugate.

    All callbacks act row-wise on arrays of shape (n, d).
    """

    value: Callable
    gradient: Callable
    conjugate_value: Callable
    conjugate_gradient: Optional[Callable] = None
    name: str = "density"


def _norm(a):
    return np.linalg.norm(np.atleast_2d(a), axis=-1)


def rof_regularized(eps) -> SmoothDensity:
    """``phi(a) = f_eps(|a|)``."""
    reg = Regularization(eps)

    def grad(a):
        a = np.atleast_2d(a)
        return feps_weight(reg, _norm(a))[..., None] * a

    def cgrad(b):
        b = np.atleast_2d(b)
        e = reg.eps
        nb = _norm(b)
        return (e / np.sqrt(np.maximum((1 - e) ** 2 - nb ** 2, 0.0)))[..., None] * b

    return SmoothDensity(
        value=lambda a: feps_eval(reg, _norm(a))[0],
        gradient=grad,
        conjugate_value=lambda b: feps_conjugate(reg, _norm(b)),
        conjugate_gradient=cgrad,
        name=f"rof_regularized({eps})",
    )


def dirichlet_p(p) -> SmoothDensity:
    """``phi(a) = |a|^p / p`` with conjugate exponent ``q = p / (p - 1)``."""
    if p <= 1:
        raise ValueError("p must exceed 1")
    q = p / (p - 1)

    def pw(a, r):
        a = np.atleast_2d(a)
        n = _norm(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(n > 0, n ** (r - 2), 0.0)
        return f[..., None] * a

    return SmoothDensity(
        value=lambda a: _norm(a) ** p / p,
        gradient=lambda a: pw(a, p),
        conjugate_value=lambda b: _norm(b) ** q / q,
        conjugate_gradient=lambda b: pw(b, q),
        name=f"dirichlet_p({p})",
    )


def quadratic() -> SmoothDensity:
    """``phi(a) = |a|^2 / 2``; self-conjugate."""
    return SmoothDensity(
        value=lambda a: 0.5 * _norm(a) ** 2,
        gradient=lambda a: np.atleast_2d(np.asarray(a, dtype=float)),
        conjugate_value=lambda b: 0.5 * _norm(b) ** 2,
        conjugate_gradient=lambda b: np.atleast_2d(np.asarray(b, dtype=float)),
        name="quadratic",
    )


def bregman_distance(density: SmoothDensity, a, b):
    """``phi(a) - phi(b) - Dphi(b) . (a - b)``, row-wise."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return density.value(a) - density.value(b) - np.einsum("nd,nd->n", density.gradient(b), a - b)


def marini_forward(density: SmoothDensity, grad_u, dpsi, mesh=None, average=False):
    """Flux reconstruction ``z = Dphi(grad u) + dpsi / d (x - x_T)``.

    Parameters
    ----------
    density : SmoothDensity
    grad_u : P0Vector or ndarray (M, d)
    dpsi : P0Function or ndarray (M,)
        Element-wise derivative of the lower-order term; becomes ``div z``.
    mesh : Triangulation, optional
        Needed when plain arrays are passed.
    average : bool
        Average the two one-sided fluxes on interior sides.

    Returns
    -------
    z : RtField
        Fluxes of the element-wise fields (first neighbour's value unless
        averaged).
    mismatch : ndarray
        One-sided flux differences per side.
    """
    mesh = mesh if mesh is not None else grad_u.mesh
    G = grad_u.values if isinstance(grad_u, P0Vector) else np.asarray(grad_u, dtype=float)
    D = dpsi.values if isinstance(dpsi, P0Function) else np.asarray(dpsi, dtype=float)
    return rt_from_affine(mesh, density.gradient(G), D / mesh.dim, average=average)


def marini_inverse(density: SmoothDensity, pi_z, dpsi_star, mesh=None):
    """Primal reconstruction ``u = dpsi_star + Dphi*(Pi z) . (x - x_T)``.

    The element-wise affine functions are sampled at the side midpoints;
    on interior sides the two one-sided values are averaged.

    Returns
    -------
    u : CrFunction
    mismatch : ndarray
        One-sided value differences per side.
    """
    mesh = mesh if mesh is not None else pi_z.mesh
    Z = pi_z.values if isinstance(pi_z, P0Vector) else np.asarray(pi_z, dtype=float)
    c = dpsi_star.values if isinstance(dpsi_star, P0Function) else np.asarray(dpsi_star, dtype=float)
    if density.conjugate_gradient is None:
        raise ValueError("density has no conjugate gradient")
    slope = density.conjugate_gradient(Z)
    xs = mesh.side_midpoints[mesh.element_sides]
    vals = c[:, None] + np.einsum("md,mjd->mj", slope, xs - mesh.barycenters[:, None, :])
    S = mesh.n_sides
    acc = np.zeros(S)
    cnt = np.zeros(S)
    np.add.at(acc, mesh.element_sides.ravel(), vals.ravel())
    np.add.at(cnt, mesh.element_sides.ravel(), 1.0)
    T0 = mesh.side_elements[:, 0]
    loc0 = np.argmax(mesh.element_sides[T0] == np.arange(S)[:, None], axis=1)
    first = vals[T0, loc0]
    mismatch = np.where(cnt == 2, np.abs(2 * first - acc), 0.0)
    return CrFunction(mesh, acc / cnt), mismatch
