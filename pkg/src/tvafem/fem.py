"""Crouzeix-Raviart and lowest-order Raviart-Thomas spaces on simplicial meshes.

CR functions are stored by their values at the side midpoints. On an
element with local sides ``j`` (opposite vertex ``P_j``) the local basis is
``phi_j = 1 - d * lambda_j``. RT0 fields are stored by their normal flux
through each side, measured along the canonical side normal; the local
basis is ``psi_j = |S_j| / (d |T|) (x - P_j)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

from .linalg import SparseMatrix, csr_from_triplets
from .mesh import DIRICHLET, Triangulation


@dataclass
class CrFunction:
    mesh: Triangulation
    dofs: np.ndarray

    def __post_init__(self):
        self.dofs = np.asarray(self.dofs, dtype=float)
        if self.dofs.shape != (self.mesh.n_sides,):
            raise ValueError("CR dof vector must have one entry per side")


@dataclass
class RtField:
    mesh: Triangulation
    dofs: np.ndarray

    def __post_init__(self):
        self.dofs = np.asarray(self.dofs, dtype=float)
        if self.dofs.shape != (self.mesh.n_sides,):
            raise ValueError("RT dof vector must have one entry per side")


@dataclass
class P0Function:
    mesh: Triangulation
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_elements,):
            raise ValueError("P0 function must have one value per element")


@dataclass
class P0Vector:
    mesh: Triangulation
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_elements, self.mesh.dim):
            raise ValueError("P0 vector must have shape (elements, dim)")


def _dofs(v):
    return v.dofs if hasattr(v, "dofs") else np.asarray(v, dtype=float)


# ---------------------------------------------------------------- quadrature

_DUNAVANT = {
    1: ([[1 / 3, 1 / 3, 1 / 3]], [1.0]),
    2: ([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]], [1 / 3] * 3),
}


def _sym3(a, w):
    b = 1 - 2 * a
    return [[b, a, a], [a, b, a], [a, a, b]], [w] * 3


def _dunavant(order):
    if order in _DUNAVANT:
        return _DUNAVANT[order]
    if order in (3, 4):
        p1, w1 = _sym3(0.445948490915965, 0.223381589678011)
        p2, w2 = _sym3(0.091576213509771, 0.109951743655322)
        return p1 + p2, w1 + w2
    p1, w1 = _sym3(0.470142064105115, 0.132394152788506)
    p2, w2 = _sym3(0.101286507323456, 0.125939180544827)
    return [[1 / 3] * 3] + p1 + p2, [0.225] + w1 + w2


def _collapsed_rule(dim, order):
    """Conical product Gauss-Jacobi rule on the reference simplex."""
    m = order // 2 + 1
    x0, w0 = roots_jacobi(m, 0, 0)
    x1, w1 = roots_jacobi(m, 1, 0)
    if dim == 2:
        a, b = np.meshgrid(x0, x1, indexing="ij")
        wa, wb = np.meshgrid(w0, w1, indexing="ij")
        s = (1 + a) / 2 * (1 - b) / 2
        t = (1 + b) / 2
        w = wa * wb / 8
        lam = np.stack([1 - s - t, s, t], axis=-1).reshape(-1, 3)
        return lam, (w / w.sum()).ravel()
    x2, w2 = roots_jacobi(m, 2, 0)
    a, b, c = np.meshgrid(x0, x1, x2, indexing="ij")
    wa, wb, wc = np.meshgrid(w0, w1, w2, indexing="ij")
    r = (1 + a) / 2 * (1 - b) / 2 * (1 - c) / 2
    s = (1 + b) / 2 * (1 - c) / 2
    t = (1 + c) / 2
    w = wa * wb * wc
    lam = np.stack([1 - r - s - t, r, s, t], axis=-1).reshape(-1, 4)
    return lam, (w / w.sum()).ravel()


@lru_cache(maxsize=None)
def quadrature_rule(dim, order, subdivide=0):
    """Barycentric quadrature points and weights on a simplex.

    Parameters
    ----------
    dim : {2, 3}
    order : int in 1..5
        Polynomial degree integrated exactly.
    subdivide : int
        Number of uniform refinements of the simplex for a composite rule;
        useful for integrands that are discontinuous inside elements.

    Returns
    -------
    lam : ndarray, shape (n, dim+1)
    w : ndarray, shape (n,)
        Weights summing to one (multiply by the element volume).
    """
    if order not in (1, 2, 3, 4, 5):
        raise ValueError(f"unsupported quadrature order {order}")
    if dim == 2:
        lam, w = (np.array(a, dtype=float) for a in _dunavant(order))
    elif dim == 3 and order == 1:
        lam, w = np.full((1, 4), 0.25), np.ones(1)
    elif dim == 3 and order == 2:
        a, b = 0.5854101966249685, 0.1381966011250105
        lam = np.full((4, 4), b) + np.eye(4) * (a - b)
        w = np.full(4, 0.25)
    elif dim == 3:
        lam, w = _collapsed_rule(3, order)
    else:
        raise ValueError("dim must be 2 or 3")
    if subdivide:
        from .mesh import Triangulation, uniform_refine
        ref = Triangulation(np.vstack([np.zeros(dim), np.eye(dim)]), [list(range(dim + 1))])
        for _ in range(subdivide):
            ref = uniform_refine(ref)
        P = ref.vertices[ref.elements]                     # (k, d+1, d) in reference coordinates
        xs = np.einsum("qj,kjd->kqd", lam, P).reshape(-1, dim)
        lam = np.column_stack([1 - xs.sum(axis=1), xs])
        w = (np.outer(ref.volumes / ref.volumes.sum(), w)).ravel()
    lam.setflags(write=False)
    w.setflags(write=False)
    return lam, w


def quad_points(mesh: Triangulation, order=3, subdivide=0, elements=None):
    """Physical quadrature points and weights for every element.

    Returns
    -------
    x : ndarray, shape (M, n, d)
    w : ndarray, shape (M, n)
        Weights including the element volume.
    lam : ndarray, shape (n, d+1)
    """
    lam, wr = quadrature_rule(mesh.dim, order, subdivide)
    el = np.arange(mesh.n_elements) if elements is None else np.asarray(elements)
    P = mesh.vertices[mesh.elements[el]]
    x = np.einsum("qj,mjd->mqd", lam, P)
    return x, mesh.volumes[el][:, None] * wr[None, :], lam


def quad_l2_element(T, f, order=3):
    """Integrate ``f`` over one simplex given by its vertex coordinates.

    Parameters
    ----------
    T : array_like, shape (d+1, d)
    f : callable
        Maps points of shape (n, d) to values of shape (n,).
    order : int in 1..5
    """
    T = np.asarray(T, dtype=float)
    d = T.shape[1]
    lam, w = quadrature_rule(d, order)
    vol = abs(np.linalg.det(T[1:] - T[0])) / (2 if d == 2 else 6)
    return float(vol * np.dot(w, np.asarray(f(lam @ T), dtype=float)))


def integrate(mesh: Triangulation, f, order=3, subdivide=0):
    """Per-element integrals of a pointwise callback."""
    x, w, _ = quad_points(mesh, order, subdivide)
    vals = np.asarray(f(x.reshape(-1, mesh.dim)), dtype=float).reshape(w.shape)
    return (vals * w).sum(axis=1)


# ---------------------------------------------------------------- CR space

def cr_interpolate(mesh: Triangulation, f) -> CrFunction:
    """CR interpolant: values of ``f`` at the side midpoints."""
    return CrFunction(mesh, np.asarray(f(mesh.side_midpoints), dtype=float))


def cr_basis_gradients(mesh: Triangulation):
    """Gradients of the local CR basis functions, shape (M, d+1, d)."""
    return -mesh.dim * mesh.barycentric_gradients


def cr_gradient(v) -> P0Vector:
    """Element-wise gradient of a CR function."""
    mesh = v.mesh
    loc = v.dofs[mesh.element_sides]
    return P0Vector(mesh, np.einsum("mj,mjd->md", loc, cr_basis_gradients(mesh)))


def cr_eval(v: CrFunction, lam, elements=None):
    """Evaluate a CR function at barycentric points ``lam`` (n, d+1) of each element.

    Returns an array of shape (M, n).
    """
    mesh = v.mesh
    el = np.arange(mesh.n_elements) if elements is None else np.asarray(elements)
    loc = v.dofs[mesh.element_sides[el]]
    return loc.sum(axis=1)[:, None] - mesh.dim * loc @ np.asarray(lam).T


def cr_vertex_values(v: CrFunction):
    """Values of the element restrictions at the element vertices, shape (M, d+1)."""
    loc = v.dofs[v.mesh.element_sides]
    return loc.sum(axis=1, keepdims=True) - v.mesh.dim * loc


def _abs_affine_simplex(vals, measure):
    """Exact integral of |f| for f affine on a k-simplex with given vertex values.

    Parameters
    ----------
    vals : ndarray, shape (n, k+1)
    measure : ndarray, shape (n,)
    """
    vals = np.asarray(vals, dtype=float)
    k = vals.shape[1] - 1
    mean = vals.mean(axis=1)
    out = measure * np.abs(mean)
    pos = (vals > 0).sum(axis=1)
    neg = (vals < 0).sum(axis=1)
    mixed = (pos > 0) & (neg > 0)
    if not mixed.any():
        return out
    f = vals[mixed]
    # orient so that exactly one vertex has the isolated sign
    if k == 1:
        flip = f[:, 0] < 0
    else:
        flip = (f > 0).sum(axis=1) == 2
    f = np.where(flip[:, None], -f, f)
    # the isolated vertex is the unique positive one
    ip = np.argmax(f > 0, axis=1)
    a = f[np.arange(len(f)), ip]
    others = f.copy()
    others[np.arange(len(f)), ip] = np.nan
    others = others[~np.isnan(others)].reshape(len(f), k)
    part = a ** (k + 1) / ((k + 1) * np.prod(a[:, None] - others, axis=1))   # int f^+ / measure
    # |f| = 2 f^+ - f, with f^+ taken for the flipped sign
    out[mixed] = measure[mixed] * (2 * part - f.mean(axis=1))
    return out


def cr_side_jumps(v: CrFunction, include_dirichlet_boundary=True):
    """Per-side L1 norms of the jump of a CR function.

    Interior sides carry the integral of the absolute jump, Dirichlet sides
    the integral of the absolute trace (if included); other boundary sides
    contribute zero.
    """
    mesh = v.mesh
    d = mesh.dim
    vv = cr_vertex_values(v)                                   # (M, d+1)
    S = mesh.n_sides
    vals = np.zeros((S, d))
    for col, sign in ((0, 1.0), (1, -1.0)):
        T = mesh.side_elements[:, col]
        ok = T >= 0
        Tk = T[ok]
        el_verts = mesh.elements[Tk]                            # (n, d+1)
        sv = mesh.sides[ok]                                     # (n, d)
        match = el_verts[:, None, :] == sv[:, :, None]           # (n, d, d+1)
        loc = np.argmax(match, axis=2)
        vals[ok] += sign * vv[Tk[:, None], loc]
    out = _abs_affine_simplex(vals, mesh.side_areas)
    boundary = mesh.side_elements[:, 1] < 0
    keep = ~boundary
    if include_dirichlet_boundary:
        keep |= mesh.boundary_tag == DIRICHLET
    return np.where(keep, out, 0.0)


def cr_jump_l1(v: CrFunction, include_dirichlet_boundary=True) -> float:
    """Total L1 norm of the jumps of a CR function over the sides."""
    return float(cr_side_jumps(v, include_dirichlet_boundary).sum())


def tv_cr(v: CrFunction, include_dirichlet_boundary=True) -> float:
    """Total variation of a CR function: gradient part plus jump part."""
    g = np.linalg.norm(cr_gradient(v).values, axis=1)
    return float((v.mesh.volumes * g).sum() + cr_jump_l1(v, include_dirichlet_boundary))


def boundary_interpolant(v: CrFunction) -> CrFunction:
    """Keep only the dofs of sides whose closure stays away from the Dirichlet boundary.

    Every side with a vertex on a Dirichlet side is zeroed, so the result
    vanishes identically on all elements touching that boundary.
    """
    mesh = v.mesh
    on_bd = np.zeros(mesh.n_vertices, dtype=bool)
    on_bd[mesh.sides[mesh.dirichlet_sides].ravel()] = True
    dofs = v.dofs.copy()
    dofs[on_bd[mesh.sides].any(axis=1)] = 0.0
    return CrFunction(mesh, dofs)


def vanishes_on_dirichlet_boundary(v: CrFunction, tol=1e-14) -> bool:
    """True if the trace of ``v`` is zero on every Dirichlet side."""
    mesh = v.mesh
    ds = mesh.dirichlet_sides
    if ds.size == 0:
        return True
    T = mesh.side_elements[ds, 0]
    vv = cr_vertex_values(v)[T]
    inside = (mesh.elements[T][:, :, None] == mesh.sides[ds][:, None, :]).any(axis=2)
    return bool(np.all(np.abs(vv[inside]) <= tol))


# ---------------------------------------------------------------- RT space

def rt_coefficients(y: RtField):
    """Affine representation ``y|_T(x) = a_T + b_T (x - x_T)``.

    Returns
    -------
    a : ndarray, shape (M, d)
        Element means.
    b : ndarray, shape (M,)
        ``div y / d`` per element.
    """
    mesh = y.mesh
    d = mesh.dim
    c = (mesh.side_orientation * y.dofs[mesh.element_sides] * mesh.side_areas[mesh.element_sides]
         / (d * mesh.volumes[:, None]))                           # (M, d+1)
    P = mesh.vertices[mesh.elements]
    a = np.einsum("mj,mjd->md", c, mesh.barycenters[:, None, :] - P)
    return a, c.sum(axis=1)


def rt_from_affine(mesh: Triangulation, a, b, average=True):
    """Fluxes of per-element affine fields ``a_T + b_T (x - x_T)``.

    Parameters
    ----------
    a : ndarray, shape (M, d)
    b : ndarray, shape (M,)
    average : bool
        If True, fluxes from the two neighbours of an interior side are
        averaged.

    Returns
    -------
    field : RtField
    mismatch : ndarray, shape (S,)
        Absolute difference of the two one-sided fluxes (zero on the boundary).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    xs = mesh.side_midpoints[mesh.element_sides]                   # (M, d+1, d)
    vec = a[:, None, :] + b[:, None, None] * (xs - mesh.barycenters[:, None, :])
    flux = np.einsum("mjd,mjd->mj", vec, mesh.outer_normals) * mesh.side_orientation
    S = mesh.n_sides
    acc = np.zeros(S)
    cnt = np.zeros(S)
    np.add.at(acc, mesh.element_sides.ravel(), flux.ravel())
    np.add.at(cnt, mesh.element_sides.ravel(), 1.0)
    first = np.zeros(S)
    T0 = mesh.side_elements[:, 0]
    loc0 = np.argmax(mesh.element_sides[T0] == np.arange(S)[:, None], axis=1)
    first = flux[T0, loc0]
    mismatch = np.where(cnt == 2, np.abs(2 * first - acc), 0.0)
    dofs = acc / cnt if average else first
    return RtField(mesh, dofs), mismatch


def rt_interpolate(mesh: Triangulation, f) -> RtField:
    """RT0 interpolant: normal component of ``f`` at the side midpoints."""
    vals = np.asarray(f(mesh.side_midpoints), dtype=float)
    return RtField(mesh, np.einsum("sd,sd->s", vals, mesh.side_normals))


def rt_divergence(y: RtField) -> P0Function:
    """Element-wise divergence from the Gauss theorem."""
    mesh = y.mesh
    flux = mesh.side_orientation * y.dofs[mesh.element_sides] * mesh.side_areas[mesh.element_sides]
    return P0Function(mesh, flux.sum(axis=1) / mesh.volumes)


def rt_eval(y: RtField, lam, elements=None):
    """Evaluate an RT field at barycentric points; returns shape (M, n, d)."""
    mesh = y.mesh
    el = np.arange(mesh.n_elements) if elements is None else np.asarray(elements)
    a, b = rt_coefficients(y)
    P = mesh.vertices[mesh.elements[el]]
    x = np.einsum("qj,mjd->mqd", np.asarray(lam), P)
    return a[el][:, None, :] + b[el][:, None, None] * (x - mesh.barycenters[el][:, None, :])


def rt_vertex_norms(y: RtField):
    """|y| at the vertices of every element, shape (M, d+1)."""
    a, b = rt_coefficients(y)
    mesh = y.mesh
    P = mesh.vertices[mesh.elements]
    vals = a[:, None, :] + b[:, None, None] * (P - mesh.barycenters[:, None, :])
    return np.linalg.norm(vals, axis=2)


def rt_linf_norm(y: RtField) -> float:
    """Exact L-infinity norm: |y| is convex on each element, so the maximum sits at a vertex."""
    if y.mesh.n_elements == 0:
        return 0.0
    return float(rt_vertex_norms(y).max())


# ---------------------------------------------------------------- projections

def p0_project(f, mesh: Triangulation | None = None, order=3, subdivide=0):
    """Element means.

    Parameters
    ----------
    f : CrFunction, RtField or callable
        A callable needs ``mesh`` and is integrated by quadrature; it may
        return scalars (n,) or vectors (n, d).
    """
    if isinstance(f, CrFunction):
        return P0Function(f.mesh, f.dofs[f.mesh.element_sides].mean(axis=1))
    if isinstance(f, RtField):
        return P0Vector(f.mesh, rt_coefficients(f)[0])
    if mesh is None:
        raise ValueError("a mesh is required to project a callback")
    x, w, _ = quad_points(mesh, order, subdivide)
    vals = np.asarray(f(x.reshape(-1, mesh.dim)), dtype=float)
    if vals.ndim == 1:
        vals = vals.reshape(w.shape)
        return P0Function(mesh, (vals * w).sum(axis=1) / mesh.volumes)
    vals = vals.reshape(*w.shape, -1)
    return P0Vector(mesh, np.einsum("mqk,mq->mk", vals, w) / mesh.volumes[:, None])


# ---------------------------------------------------------------- assembly

def _element_triplets(mesh, local):
    """Scatter local matrices (M, k, k) into triplet arrays."""
    es = mesh.element_sides
    k = es.shape[1]
    rows = np.repeat(es, k, axis=1).ravel()
    cols = np.tile(es, (1, k)).ravel()
    return rows, cols, local.reshape(-1)


def cr_local_mass(d):
    """Exact CR mass matrix of an element of unit volume."""
    k = d + 1
    off = 1 - 2 * d / k + d * d / (k * (k + 1))
    diag = 1 - 2 * d / k + 2 * d * d / (k * (k + 1))
    return np.full((k, k), off) + np.eye(k) * (diag - off)


def assemble_cr_mass(mesh: Triangulation) -> SparseMatrix:
    """L2 mass matrix of the CR space (diagonal in 2D, exact in any dimension)."""
    n = mesh.n_sides
    if mesh.dim == 2:
        diag = np.zeros(n)
        np.add.at(diag, mesh.element_sides.ravel(), np.repeat(mesh.volumes / 3, 3))
        return csr_from_triplets(n, n, rows=np.arange(n), cols=np.arange(n), vals=diag)
    local = mesh.volumes[:, None, None] * cr_local_mass(mesh.dim)[None]
    r, c, v = _element_triplets(mesh, local)
    return csr_from_triplets(n, n, rows=r, cols=c, vals=v)


def assemble_weighted_stiffness(mesh: Triangulation, w) -> SparseMatrix:
    """Stiffness matrix with element-wise weights ``w >= 0``."""
    w = w.values if isinstance(w, P0Function) else np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("stiffness weights must be non-negative")
    G = cr_basis_gradients(mesh)
    local = (w * mesh.volumes)[:, None, None] * np.einsum("mid,mjd->mij", G, G)
    r, c, v = _element_triplets(mesh, local)
    return csr_from_triplets(mesh.n_sides, mesh.n_sides, rows=r, cols=c, vals=v)


def assemble_pi_mass(mesh: Triangulation) -> SparseMatrix:
    """Matrix of ``(Pi phi_S, Pi phi_S')``: rank one per element."""
    k = mesh.dim + 1
    local = np.broadcast_to((mesh.volumes / k ** 2)[:, None, None], (mesh.n_elements, k, k))
    r, c, v = _element_triplets(mesh, np.ascontiguousarray(local))
    return csr_from_triplets(mesh.n_sides, mesh.n_sides, rows=r, cols=c, vals=v)


def assemble_p0_load(mesh: Triangulation, g_h) -> np.ndarray:
    """Vector of ``(g_h, Pi phi_S)`` for a piecewise constant ``g_h``."""
    g = g_h.values if isinstance(g_h, P0Function) else np.asarray(g_h, dtype=float)
    k = mesh.dim + 1
    b = np.zeros(mesh.n_sides)
    np.add.at(b, mesh.element_sides.ravel(), np.repeat(g * mesh.volumes / k, k))
    return b


def free_dofs(mesh: Triangulation):
    """Indices of CR dofs not fixed by a homogeneous Dirichlet condition."""
    return np.flatnonzero(mesh.boundary_tag != DIRICHLET)


class CrPattern:
    """Sparsity pattern shared by all element-assembled CR matrices of a mesh.

    Assembly then reduces to a weighted bincount of the local entries into
    the CSR value array.
    """

    def __init__(self, mesh: Triangulation):
        es = mesh.element_sides
        k = es.shape[1]
        n = mesh.n_sides
        rows = np.repeat(es, k, axis=1).ravel()
        cols = np.tile(es, (1, k)).ravel()
        key = rows * n + cols
        uniq, inv = np.unique(key, return_inverse=True)
        self.n = n
        self.index = inv
        r, c = np.divmod(uniq, n)
        self.rows, self.cols = r, c
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))])
        self.diag_pos = np.flatnonzero(r == c)
        constrained = mesh.boundary_tag == DIRICHLET
        self.constrained_entry = constrained[r] | constrained[c]
        self.constrained_diag = self.diag_pos[constrained]

    def assemble(self, local, dirichlet_identity=False) -> SparseMatrix:
        """Sum local matrices of shape (M, k, k) into a CSR matrix.

        With ``dirichlet_identity`` the rows and columns of Dirichlet dofs are
        replaced by those of the identity (symmetric elimination).
        """
        data = np.bincount(self.index, weights=np.asarray(local).reshape(-1), minlength=self.rows.size)
        if dirichlet_identity:
            data[self.constrained_entry] = 0.0
            data[self.constrained_diag] = 1.0
        return SparseMatrix(self.n, self.n, self.indptr, self.cols, data)


def cr_pattern(mesh: Triangulation) -> CrPattern:
    pat = mesh.__dict__.get("_cr_pattern")
    if pat is None:
        pat = CrPattern(mesh)
        mesh.__dict__["_cr_pattern"] = pat
    return pat
