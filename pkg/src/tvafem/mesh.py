"""Conforming simplicial meshes, side connectivity and refinement.

Conventions
-----------
* ``elements[T, j]`` is the j-th vertex of element ``T``; local side ``j``
  of ``T`` is the face opposite that vertex, ``element_sides[T, j]``.
* ``sides`` hold sorted vertex indices. ``side_elements[S] = (T0, T1)``
  with ``T0 < T1``; ``T1 = -1`` on the boundary.
* The unit normal of a side points out of ``side_elements[S, 0]``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from math import factorial

import numpy as np

INTERIOR, DIRICHLET, NEUMANN = 0, 1, 2


class MeshError(ValueError):
    pass


def _signed_volumes(vertices, elements):
    P = vertices[elements]                       # (M, d+1, d)
    J = P[:, 1:, :] - P[:, :1, :]                # (M, d, d)
    d = vertices.shape[1]
    return np.linalg.det(J) / factorial(d)


def _orient(vertices, elements):
    """Swap the first two vertices of negatively oriented elements."""
    elements = np.array(elements, dtype=np.int64, copy=True)
    vol = _signed_volumes(vertices, elements)
    neg = vol < 0
    elements[neg, 0], elements[neg, 1] = elements[neg, 1], elements[neg, 0].copy()
    return elements


def extract_sides(elements, n_vertices=None):
    """Enumerate the sides of a simplicial mesh.

    Parameters
    ----------
    elements : ndarray of int, shape (M, d+1)
    n_vertices : int, optional

    Returns
    -------
    sides : ndarray, shape (S, d)
        Sorted vertex indices, ordered by key.
    element_sides : ndarray, shape (M, d+1)
        Side index of the face opposite each local vertex.
    side_elements : ndarray, shape (S, 2)
        Adjacent elements, lower index first, ``-1`` if absent.

    Raises
    ------
    MeshError
        If a face is shared by more than two elements.
    """
    elements = np.asarray(elements, dtype=np.int64)
    M, k = elements.shape
    if n_vertices is None:
        n_vertices = int(elements.max()) + 1 if elements.size else 0
    faces = np.stack([np.delete(elements, j, axis=1) for j in range(k)], axis=1)  # (M, k, d)
    faces = np.sort(faces, axis=2).reshape(M * k, k - 1)
    key = np.zeros(M * k, dtype=np.int64)
    for c in range(k - 1):
        key = key * n_vertices + faces[:, c]
    uniq, first, inv, counts = np.unique(key, return_index=True, return_inverse=True, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("non-manifold mesh: a face is shared by more than two elements")
    sides = faces[first]
    element_sides = inv.reshape(M, k)
    owner = np.repeat(np.arange(M), k)
    order = np.lexsort((owner, inv))
    side_elements = -np.ones((uniq.size, 2), dtype=np.int64)
    starts = np.searchsorted(inv[order], np.arange(uniq.size))
    side_elements[:, 0] = owner[order][starts]
    two = counts == 2
    side_elements[two, 1] = owner[order][starts[two] + 1]
    return sides, element_sides, side_elements


class Triangulation:
    """Conforming simplicial triangulation in 2D or 3D.

    Parameters
    ----------
    vertices : ndarray, shape (N, d)
    elements : ndarray of int, shape (M, d+1)
        Re-oriented to positive volume if necessary.
    boundary_tag : ndarray of int, optional
        Per-side tag (``INTERIOR``, ``DIRICHLET``, ``NEUMANN``). If omitted,
        boundary sides are tagged by ``dirichlet``.
    dirichlet : bool or callable
        Used only when ``boundary_tag`` is omitted. A callable receives the
        side barycenters (n, d) and returns a boolean mask.
    generation : ndarray of int, optional
        Refinement depth of each element.
    parent : ndarray of int, optional
        Element of the parent mesh containing each element.
    """

    def __init__(self, vertices, elements, boundary_tag=None, dirichlet=True,
                 generation=None, parent=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.dim = self.vertices.shape[1]
        if self.dim not in (2, 3):
            raise MeshError("only 2D and 3D meshes are supported")
        elements = np.asarray(elements, dtype=np.int64)
        if elements.ndim != 2 or elements.shape[1] != self.dim + 1:
            raise MeshError("elements must have d+1 vertices")
        self.elements = _orient(self.vertices, elements)
        self.sides, self.element_sides, self.side_elements = extract_sides(
            self.elements, len(self.vertices))
        nb = self.side_elements[:, 1] < 0
        if boundary_tag is None:
            tag = np.zeros(len(self.sides), dtype=np.int8)
            if callable(dirichlet):
                mask = np.asarray(dirichlet(self.side_midpoints[nb]), dtype=bool)
            else:
                mask = np.full(nb.sum(), bool(dirichlet))
            tag[nb] = np.where(mask, DIRICHLET, NEUMANN)
            self.boundary_tag = tag
        else:
            self.boundary_tag = np.asarray(boundary_tag, dtype=np.int8)
            if self.boundary_tag.shape != (len(self.sides),):
                raise MeshError("boundary_tag length differs from side count")
        self.generation = (np.zeros(len(self.elements), dtype=np.int64)
                           if generation is None else np.asarray(generation, dtype=np.int64))
        self.parent = None if parent is None else np.asarray(parent, dtype=np.int64)

    # sizes
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def n_sides(self):
        return len(self.sides)

    # geometry
    @cached_property
    def volumes(self):
        return _signed_volumes(self.vertices, self.elements)

    @cached_property
    def barycenters(self):
        return self.vertices[self.elements].mean(axis=1)

    @cached_property
    def barycentric_gradients(self):
        """Gradients of the barycentric coordinates, shape (M, d+1, d)."""
        P = self.vertices[self.elements]
        J = P[:, 1:, :] - P[:, :1, :]            # rows are edge vectors
        Jinv = np.linalg.inv(J)                  # columns give grad lambda_1..d
        G = np.empty((self.n_elements, self.dim + 1, self.dim))
        G[:, 1:, :] = np.transpose(Jinv, (0, 2, 1))
        G[:, 0, :] = -G[:, 1:, :].sum(axis=1)
        return G

    @cached_property
    def side_midpoints(self):
        return self.vertices[self.sides].mean(axis=1)

    @cached_property
    def side_areas(self):
        P = self.vertices[self.sides]
        if self.dim == 2:
            return np.linalg.norm(P[:, 1] - P[:, 0], axis=1)
        return 0.5 * np.linalg.norm(np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]), axis=1)

    @cached_property
    def outer_normals(self):
        """Unit outward normals of the local sides, shape (M, d+1, d)."""
        G = self.barycentric_gradients
        return -G / np.linalg.norm(G, axis=2, keepdims=True)

    @cached_property
    def side_orientation(self):
        """+1 where the element owns the side normal, -1 otherwise, shape (M, d+1)."""
        own = self.side_elements[self.element_sides, 0] == np.arange(self.n_elements)[:, None]
        return np.where(own, 1.0, -1.0)

    @cached_property
    def side_normals(self):
        T0 = self.side_elements[:, 0]
        loc = np.argmax(self.element_sides[T0] == np.arange(self.n_sides)[:, None], axis=1)
        return self.outer_normals[T0, loc]

    @cached_property
    def diameters(self):
        P = self.vertices[self.elements]
        k = self.dim + 1
        h = np.zeros(self.n_elements)
        for a, b in itertools.combinations(range(k), 2):
            h = np.maximum(h, np.linalg.norm(P[:, a] - P[:, b], axis=1))
        return h

    @cached_property
    def boundary_sides(self):
        return np.flatnonzero(self.side_elements[:, 1] < 0)

    @cached_property
    def dirichlet_sides(self):
        return np.flatnonzero(self.boundary_tag == DIRICHLET)

    @cached_property
    def boundary_vertices(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.sides[self.boundary_sides].ravel()] = True
        return mask

    @property
    def has_dirichlet(self):
        return bool(np.any(self.boundary_tag == DIRICHLET))

    def __repr__(self):
        return (f"Triangulation(dim={self.dim}, vertices={self.n_vertices}, "
                f"elements={self.n_elements}, sides={self.n_sides})")


@dataclass
class MeshStats:
    avg_meshsize: float
    per_element_diameter: np.ndarray
    chunkiness: float
    n_vertices: int


def mesh_stats(mesh: Triangulation) -> MeshStats:
    """Average mesh size, element diameters and the worst diameter-to-inradius ratio."""
    hT = mesh.diameters
    faces = mesh.side_areas[mesh.element_sides].sum(axis=1)
    inradius = mesh.dim * mesh.volumes / faces
    return MeshStats(float(hT.mean()), hT, float(np.max(hT / inradius)), mesh.n_vertices)


def _box_arrays(box):
    box = np.asarray(box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise MeshError("box must be a sequence of (low, high) pairs")
    if np.any(box[:, 1] <= box[:, 0]):
        raise MeshError("degenerate box")
    return box


def uniform_triangulation(box, subdivisions, dirichlet=True) -> Triangulation:
    """Structured mesh of an axis-aligned box.

    Each grid square is halved by the diagonal through its lower-left and
    upper-right corners; in 3D each cube is split into the six Kuhn
    tetrahedra sharing the main diagonal.

    Parameters
    ----------
    box : sequence of (low, high)
        One pair per axis, 2 or 3 axes.
    subdivisions : int
        Cells per axis.
    dirichlet : bool or callable
        Boundary predicate, see :class:`Triangulation`.
    """
    box = _box_arrays(box)
    n = int(subdivisions)
    if n < 1:
        raise MeshError("subdivisions must be >= 1")
    d = box.shape[0]
    axes = [np.linspace(lo, hi, n + 1) for lo, hi in box]
    grid = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.ravel() for g in grid], axis=1)
    strides = np.array([(n + 1) ** (d - 1 - a) for a in range(d)])
    cells = np.stack(np.meshgrid(*[np.arange(n)] * d, indexing="ij"), axis=-1).reshape(-1, d)
    base = cells @ strides
    elems = []
    for perm in itertools.permutations(range(d)):
        offs = [0]
        acc = 0
        for a in perm:
            acc += strides[a]
            offs.append(acc)
        elems.append(base[:, None] + np.array(offs)[None, :])
    elements = np.concatenate(elems, axis=0)
    return Triangulation(vertices, elements, dirichlet=dirichlet)


def _inherit_boundary_tags(old: Triangulation, vertices, elements, parent):
    """Tag the boundary sides of a refined mesh from the parent boundary sides."""
    sides, element_sides, side_elements = extract_sides(elements, len(vertices))
    tag = np.zeros(len(sides), dtype=np.int8)
    nb = np.flatnonzero(side_elements[:, 1] < 0)
    if nb.size:
        xs = vertices[sides[nb]].mean(axis=1)
        p = parent[side_elements[nb, 0]]
        osides = old.element_sides[p]                          # (n, d+1)
        onorm = old.outer_normals[p]                           # (n, d+1, d)
        anchor = old.vertices[old.sides[osides][:, :, 0]]      # (n, d+1, d)
        dist = np.abs(np.einsum("nkd,nkd->nk", xs[:, None, :] - anchor, onorm))
        dist[old.boundary_tag[osides] == INTERIOR] = np.inf
        k = np.argmin(dist, axis=1)
        tag[nb] = old.boundary_tag[osides[np.arange(nb.size), k]]
    return tag


def _midpoint_vertices(mesh, edge_pairs):
    """Append edge midpoints; returns new vertex array and an index lookup."""
    mid = 0.5 * (mesh.vertices[edge_pairs[:, 0]] + mesh.vertices[edge_pairs[:, 1]])
    return np.vstack([mesh.vertices, mid])


def _longest_edge_local(mesh):
    """Local index of the vertex opposite the longest edge of each triangle."""
    P = mesh.vertices[mesh.elements]
    L = np.stack([np.linalg.norm(P[:, (j + 1) % 3] - P[:, (j + 2) % 3], axis=1)
                  for j in range(3)], axis=1)
    # ties go to the lowest local index, with a relative tolerance
    Lmax = L.max(axis=1, keepdims=True)
    return np.argmax(L >= Lmax * (1 - 1e-12), axis=1)


def rgb_refine(mesh: Triangulation, marked) -> Triangulation:
    """Red-green-blue refinement of a 2D mesh.

    All sides of the marked elements are bisected, and the closure then also
    bisects the reference (longest) side of every element with a bisected
    side. Elements with three bisected sides are split red, with two blue and
    with one (the reference side) green.

    Parameters
    ----------
    mesh : Triangulation
        2D mesh.
    marked : array_like of int or bool mask

    Returns
    -------
    Triangulation
        Conforming refinement; ``parent`` maps every new element to the
        element of ``mesh`` that contains it.
    """
    if mesh.dim != 2:
        raise MeshError("rgb_refine is 2D only; use uniform_refine in 3D")
    marked = np.asarray(marked)
    if marked.dtype == bool:
        marked = np.flatnonzero(marked)
    marked = marked.astype(np.int64)
    if marked.size == 0:
        return mesh
    M = mesh.n_elements
    r = _longest_edge_local(mesh)
    rows = np.arange(M)
    # reorder each triangle as (p0, p1, p2) with reference edge p0p1
    loc = np.stack([(r + 1) % 3, (r + 2) % 3, r], axis=1)
    tri = mesh.elements[rows[:, None], loc]
    es = mesh.element_sides[rows[:, None], loc]     # sides opposite p0, p1, p2
    side_a, side_b, side_ref = es[:, 0], es[:, 1], es[:, 2]

    flag = np.zeros(mesh.n_sides, dtype=bool)
    flag[mesh.element_sides[marked].ravel()] = True
    while True:
        need = flag[mesh.element_sides].any(axis=1) & ~flag[side_ref]
        if not need.any():
            break
        flag[side_ref[need]] = True

    new_index = -np.ones(mesh.n_sides, dtype=np.int64)
    fs = np.flatnonzero(flag)
    new_index[fs] = mesh.n_vertices + np.arange(fs.size)
    vertices = _midpoint_vertices(mesh, mesh.sides[fs])

    p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
    m, ma, mb = new_index[side_ref], new_index[side_a], new_index[side_b]
    fa, fb, fr = flag[side_a], flag[side_b], flag[side_ref]
    children, parents = [], []

    def add(sel, *tris):
        idx = np.flatnonzero(sel)
        for t in tris:
            children.append(np.stack([c[idx] for c in t], axis=1))
            parents.append(idx)

    add(~fr, (p0, p1, p2))
    add(fr & ~fa & ~fb, (p0, m, p2), (m, p1, p2))
    add(fr & ~fa & fb, (m, p1, p2), (p0, m, mb), (m, p2, mb))
    add(fr & fa & ~fb, (p0, m, p2), (m, p1, ma), (m, ma, p2))
    add(fr & fa & fb, (p0, m, mb), (m, p1, ma), (mb, ma, p2), (m, ma, mb))
    elements = np.concatenate(children, axis=0)
    parent = np.concatenate(parents)
    order = np.argsort(parent, kind="stable")
    elements, parent = elements[order], parent[order]
    elements = _orient(vertices, elements)
    generation = mesh.generation[parent] + fr[parent].astype(np.int64)
    tag = _inherit_boundary_tags(mesh, vertices, elements, parent)
    return Triangulation(vertices, elements, boundary_tag=tag, generation=generation, parent=parent)


def _edges(elements):
    k = elements.shape[1]
    pairs = list(itertools.combinations(range(k), 2))
    E = np.sort(np.stack([elements[:, list(p)] for p in pairs], axis=1), axis=2)  # (M, npairs, 2)
    flat = E.reshape(-1, 2)
    n = int(elements.max()) + 1
    key = flat[:, 0] * n + flat[:, 1]
    uniq, first, inv = np.unique(key, return_index=True, return_inverse=True)
    return flat[first], inv.reshape(len(elements), len(pairs)), pairs


_BEY_CHILDREN = [
    ("0", "01", "02", "03"), ("01", "1", "12", "13"), ("02", "12", "2", "23"),
    ("03", "13", "23", "3"), ("01", "02", "03", "13"), ("01", "02", "12", "13"),
    ("02", "03", "13", "23"), ("02", "12", "13", "23"),
]
_RED2D_CHILDREN = [("0", "01", "02"), ("01", "1", "12"), ("02", "12", "2"), ("01", "12", "02")]


def uniform_refine(mesh: Triangulation) -> Triangulation:
    """Split every element into 2^d children through its edge midpoints.

    In 3D this is the red refinement of Bey; the interior octahedron is cut
    along the diagonal joining the midpoints of edges 02 and 13.
    """
    if mesh.dim == 2:
        return rgb_refine(mesh, np.arange(mesh.n_elements))
    edges, elem_edges, pairs = _edges(mesh.elements)
    vertices = _midpoint_vertices(mesh, edges)
    lookup = {}
    for j in range(4):
        lookup[str(j)] = mesh.elements[:, j]
    for c, (a, b) in enumerate(pairs):
        lookup[f"{a}{b}"] = mesh.n_vertices + elem_edges[:, c]
    children = [np.stack([lookup[k] for k in ch], axis=1) for ch in _BEY_CHILDREN]
    elements = np.stack(children, axis=1).reshape(-1, 4)
    parent = np.repeat(np.arange(mesh.n_elements), 8)
    elements = _orient(vertices, elements)
    tag = _inherit_boundary_tags(mesh, vertices, elements, parent)
    return Triangulation(vertices, elements, boundary_tag=tag,
                         generation=mesh.generation[parent] + 1, parent=parent)


def refine(mesh: Triangulation, marked) -> Triangulation:
    """Refine ``marked`` elements: RGB in 2D, uniform red refinement in 3D."""
    if mesh.dim == 2:
        return rgb_refine(mesh, marked)
    return uniform_refine(mesh)


def check_conformity(mesh: Triangulation, box=None, tol=1e-10) -> bool:
    """Return True if the mesh is conforming and positively oriented.

    Hanging vertices show up as sides with a single neighbour in the
    interior of the domain; with ``box`` given these are detected by
    checking that every boundary side lies on a face of the box.
    """
    if np.any(mesh.volumes <= 0):
        return False
    # each side is a face of each of its neighbours
    for col in (0, 1):
        T = mesh.side_elements[:, col]
        ok = T >= 0
        if not np.all((mesh.element_sides[T[ok]] == np.flatnonzero(ok)[:, None]).any(axis=1)):
            return False
    if box is not None:
        box = _box_arrays(box)
        P = mesh.vertices[mesh.sides[mesh.boundary_sides]]          # (nb, d, d)
        on_face = np.zeros(len(P), dtype=bool)
        for a in range(mesh.dim):
            for v in box[a]:
                on_face |= np.all(np.abs(P[:, :, a] - v) < tol, axis=1)
        if not on_face.all():
            return False
        if abs(mesh.volumes.sum() - np.prod(box[:, 1] - box[:, 0])) > tol * 10:
            return False
    return True
