"""Adaptive loop: solve, estimate, mark, refine, update the regularization."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .estimator import dual_report, eta_cr, marini_fields, rho_tilde_sq
from .fem import (CrFunction, P0Function, RtField, boundary_interpolant, p0_project,
                  vanishes_on_dirichlet_boundary)
from .mesh import Triangulation, mesh_stats, refine
from .rof import FlowConfig, RofProblem, solve_rof

log = logging.getLogger(__name__)

EPS_MIN, EPS_MAX = 1e-14, 1 - 1e-8


@dataclass
class AfemConfig:
    """Settings of the adaptive loop.

    Parameters
    ----------
    theta : float in (0, 1]
        Bulk parameter; the marked indicators carry ``theta^2`` of the total.
    eps_strategy : {"global", "local"}
    eps_stop_global : float
        Stop once ``eta^2`` drops below this value.
    max_levels : int
    uniform : bool
        Refine every element instead of marking.
    warm_start : bool
        Start each flow from the prolongated previous solution instead of zero.
    max_vertices : int, optional
        Stop before a refinement would be solved on a larger mesh.
    """

    theta: float = 0.5
    eps_strategy: str = "global"
    eps_stop_global: float = 0.0
    max_levels: int = 10
    flow: FlowConfig = field(default_factory=FlowConfig)
    uniform: bool = False
    warm_start: bool = False
    max_vertices: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ValueError("theta must lie in (0, 1]")
        if self.eps_strategy not in ("global", "local"):
            raise ValueError("eps_strategy must be 'global' or 'local'")
        if self.max_levels < 1:
            raise ValueError("max_levels must be >= 1")


@dataclass
class ProblemSpec:
    """Everything the adaptive loop needs to set up a level.

    Parameters
    ----------
    mesh : Triangulation
        Initial mesh; boundary tags fix the Dirichlet part.
    alpha : float
    g : callable
        Pointwise data.
    exact : object, optional
        Exact solution with ``u`` and ``div_z`` callbacks.
    project : callable, optional
        ``mesh -> P0Function`` computing ``g_h``; defaults to quadrature.
    quad_order, quad_subdivide : int
        Quadrature for terms involving ``g`` and the exact solution.
    estimator_exact_g : bool
        Use the pointwise data in the estimator's fidelity term.
    name : str
    """

    mesh: Triangulation
    alpha: float
    g: Callable
    exact: object = None
    project: Optional[Callable] = None
    quad_order: int = 3
    quad_subdivide: int = 0
    estimator_exact_g: bool = True
    name: str = "problem"

    def g_h(self, mesh):
        if self.project is not None:
            return self.project(mesh)
        return p0_project(self.g, mesh, order=self.quad_order, subdivide=self.quad_subdivide)


@dataclass
class AfemLevel:
    level: int
    mesh: Triangulation
    u: CrFunction
    u_bar: CrFunction
    z_bar: RtField
    eta_sq: float
    rho_tilde_sq: Optional[float]
    n_vertices: int
    h: float
    flow_steps: int
    eps: np.ndarray
    eta_local: np.ndarray
    linf_raw: float
    flux_mismatch: float
    pi_margin: float
    marini_pi_margin: float
    duality_gap: float
    stability_defect: float
    wall_time: float
    problem: Optional[RofProblem] = None
    jump_term: float = 0.0

    @property
    def eta(self):
        return float(np.sqrt(max(self.eta_sq, 0.0)))

    @property
    def rho_tilde(self):
        return None if self.rho_tilde_sq is None else float(np.sqrt(max(self.rho_tilde_sq, 0.0)))


def doerfler_mark(indicators, theta):
    """Minimal set carrying ``theta^2`` of the indicator sum.

    Elements are taken in descending order of their indicator, ties by
    increasing index. For ``theta = 1`` all elements with positive
    indicator are returned.
    """
    eta = np.asarray(indicators, dtype=float)
    if np.any(eta < 0):
        raise ValueError("indicators must be non-negative")
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    if theta >= 1:
        return np.flatnonzero(eta > 0)
    total = eta.sum()
    if total <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(eta.size), -eta))
    csum = np.cumsum(eta[order])
    k = int(np.searchsorted(csum, theta ** 2 * total, side="left")) + 1
    k = min(k, eta.size)
    return np.sort(order[:k])


def transfer_p0(values, mesh_new: Triangulation):
    """Piecewise constant prolongation through the parent map of a refinement."""
    if mesh_new.parent is None:
        raise ValueError("mesh has no parent map")
    return np.asarray(values)[mesh_new.parent]


def prolongate_cr(u: CrFunction, mesh_new: Triangulation) -> CrFunction:
    """Evaluate the element-wise affine ``u`` at the side midpoints of a refinement."""
    old = u.mesh
    par = mesh_new.parent
    loc = u.dofs[old.element_sides[par]]                       # (M, d+1)
    G = -old.dim * old.barycentric_gradients[par]              # (M, d+1, d)
    grad = np.einsum("mj,mjd->md", loc, G)
    mean = loc.mean(axis=1)
    xs = mesh_new.side_midpoints[mesh_new.element_sides]       # (M, d+1, d)
    vals = mean[:, None] + np.einsum("md,mjd->mj", grad, xs - old.barycenters[par][:, None, :])
    acc = np.bincount(mesh_new.element_sides.ravel(), weights=vals.ravel(), minlength=mesh_new.n_sides)
    cnt = np.bincount(mesh_new.element_sides.ravel(), minlength=mesh_new.n_sides)
    return CrFunction(mesh_new, acc / cnt)


def update_epsilon(strategy, mesh_new: Triangulation, u_prev, g_h_new, alpha, d=None) -> P0Function:
    """Regularization parameter on a new mesh.

    ``global``: ``h^2``. ``local``: ``alpha/d |Pi u_prev - g_h| h^2 + h^3``
    with ``h`` the average mesh size and ``Pi u_prev`` transferred to the new
    elements through their parents. Values are clamped to ``[1e-14, 1 - 1e-8]``.

    Parameters
    ----------
    u_prev : CrFunction, P0Function, ndarray or None
        Previous solution, its element means on the old mesh, or already
        transferred element values on ``mesh_new``. ``None`` means zero.
    """
    d = mesh_new.dim if d is None else d
    h = mesh_stats(mesh_new).avg_meshsize
    n = mesh_new.n_elements
    if strategy == "global":
        eps = np.full(n, h * h)
    elif strategy == "local":
        g = g_h_new.values if isinstance(g_h_new, P0Function) else np.asarray(g_h_new, dtype=float)
        if u_prev is None:
            pu = np.zeros(n)
        else:
            if isinstance(u_prev, CrFunction):
                u_prev = p0_project(u_prev)
            vals = u_prev.values if isinstance(u_prev, P0Function) else np.asarray(u_prev, dtype=float)
            if isinstance(u_prev, P0Function) and u_prev.mesh is not mesh_new:
                vals = transfer_p0(vals, mesh_new)
            pu = np.broadcast_to(vals, (n,))
        eps = alpha / d * np.abs(pu - g) * h * h + h ** 3
    else:
        raise ValueError(f"unknown eps strategy {strategy!r}")
    return P0Function(mesh_new, np.clip(eps, EPS_MIN, EPS_MAX))


def afem_run(spec: ProblemSpec, cfg: AfemConfig | None = None, callback=None, keep_problems=False):
    """Run the adaptive loop.

    Parameters
    ----------
    spec : ProblemSpec
    cfg : AfemConfig, optional
    callback : callable, optional
        Called with each finished :class:`AfemLevel`.
    keep_problems : bool
        Store the per-level :class:`RofProblem` on the levels.

    Returns
    -------
    list of AfemLevel
        Solver failures propagate; the levels finished so far are attached
        to the exception as ``levels``.
    """
    cfg = cfg or AfemConfig()
    mesh = spec.mesh
    g_h = spec.g_h(mesh)
    eps = update_epsilon(cfg.eps_strategy, mesh, None, g_h, spec.alpha)
    levels = []
    u0 = None
    for level in range(cfg.max_levels):
        t0 = time.perf_counter()
        problem = RofProblem(mesh, spec.alpha, g_h, eps, spec.g, spec.quad_order, spec.quad_subdivide)
        try:
            flow = solve_rof(problem, cfg.flow, u0=u0)
        except Exception as exc:
            exc.levels = levels
            raise
        u = flow.u
        u_bar = u if vanishes_on_dirichlet_boundary(u) else boundary_interpolant(u)
        dual = dual_report(problem, u)
        a, _ = marini_fields(problem, u)
        marini_margin = float(np.max(np.linalg.norm(a, axis=1) - (1 - eps.values)))
        est = eta_cr(problem, u_bar, dual.z_admissible,
                     use_exact_g=spec.estimator_exact_g and spec.g is not None)
        rho = (rho_tilde_sq(problem, u_bar, dual.z_admissible, spec.exact)
               if spec.exact is not None else None)
        stab = flow.energy_trace[-1] + flow.dissipation - flow.energy_trace[0]
        stats = mesh_stats(mesh)
        rec = AfemLevel(level, mesh, u, u_bar, dual.z_admissible, est.eta_sq_global, rho,
                        mesh.n_vertices, stats.avg_meshsize, flow.steps, eps.values, est.eta_sq_local,
                        dual.linf_raw, dual.flux_mismatch, dual.pi_margin, marini_margin,
                        dual.duality_gap, stab, time.perf_counter() - t0,
                        problem if keep_problems else None, est.jump_term)
        levels.append(rec)
        log.info("level %d: N=%d eta=%.4e rho=%s steps=%d (%.1fs)", level, mesh.n_vertices, rec.eta,
                 "-" if rho is None else f"{np.sqrt(rho):.4e}", flow.steps, rec.wall_time)
        if callback is not None:
            callback(rec)
        if est.eta_sq_global <= cfg.eps_stop_global or level == cfg.max_levels - 1:
            break
        marked = (np.arange(mesh.n_elements) if cfg.uniform
                  else doerfler_mark(est.eta_sq_local, cfg.theta))
        new_mesh = refine(mesh, marked)
        if cfg.max_vertices is not None and new_mesh.n_vertices > cfg.max_vertices:
            break
        g_h = spec.g_h(new_mesh)
        pu = transfer_p0(p0_project(u).values, new_mesh)
        eps = update_epsilon(cfg.eps_strategy, new_mesh, pu, g_h, spec.alpha)
        u0 = prolongate_cr(u, new_mesh) if cfg.warm_start else None
        mesh = new_mesh
    return levels


def fitted_rate(n_vertices, eta, dim=2):
    """Least-squares slope of ``log eta`` against ``log N^(-1/d)``."""
    x = -np.log(np.asarray(n_vertices, dtype=float)) / dim
    y = np.log(np.asarray(eta, dtype=float))
    return float(np.polyfit(x, y, 1)[0])
