"""Benchmark problems with known solutions and synthetic image data."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .afem import ProblemSpec
from .fem import P0Function, quad_points, quadrature_rule
from .mesh import Triangulation, uniform_triangulation


@dataclass(frozen=True)
class ExactSolution:
    """Exact primal and dual solution of an ROF problem."""

    u: Callable
    z: Callable
    div_z: Callable
    g: Callable
    alpha: float
    domain: tuple
    dirichlet: bool


def _norm(x):
    return np.linalg.norm(np.atleast_2d(x), axis=1)


def one_disk(dim=2, radius=0.5, alpha=10.0) -> ExactSolution:
    """Indicator of a centred ball; the solution is a scaled copy of the data."""
    r = radius
    height = 1 - dim / (alpha * r)

    def g(x):
        return (_norm(x) < r).astype(float)

    def u(x):
        return height * g(x)

    def z(x):
        x = np.atleast_2d(x)
        n = _norm(x)[:, None]
        inside = n < r
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -(r ** (dim - 1)) * x / n ** dim
        return np.where(inside, -x / r, out)

    def div_z(x):
        return np.where(_norm(x) < r, -dim / r, 0.0)

    return ExactSolution(u, z, div_z, g, alpha, tuple([(-1.0, 1.0)] * dim), True)


def two_disks(radius=0.5, alpha=10.0) -> ExactSolution:
    """Two touching discs of opposite sign centred at ``(+-r, 0)``."""
    r = radius
    c = np.array([r, 0.0])
    height = 1 - 2 / (alpha * r)

    def g(x):
        x = np.atleast_2d(x)
        return (_norm(x - c) < r).astype(float) - (_norm(x + c) < r).astype(float)

    def u(x):
        return height * g(x)

    def z(x):
        x = np.atleast_2d(x)
        right = x[:, :1] >= 0
        s = np.where(right, 1.0, -1.0)
        y = x - s * c
        n = _norm(y)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -s * r * y / n ** 2
        return np.where(n < r, -s * y / r, out)

    def div_z(x):
        x = np.atleast_2d(x)
        s = np.where(x[:, 0] >= 0, 1.0, -1.0)
        inside = _norm(x - s[:, None] * c) < r
        return np.where(inside, -s * 2 / r, 0.0)

    return ExactSolution(u, z, div_z, g, alpha, ((-1.5, 1.5), (-1.5, 1.5)), True)


def cone(t=0.1, alpha=10.0) -> ExactSolution:
    """Radial solution with a flat top, a cone-shaped flank and zero outside.

    ``s = sqrt(3 t)`` bounds the flat part; the flank ends where
    ``|x|^2 - |x| + t = 0``, so the solution is continuous. The data are
    ``g = u - div z / alpha``.
    """
    s = np.sqrt(3 * t)
    r = 0.5 * (1 + np.sqrt(1 - 4 * t))

    def u(x):
        n = _norm(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            flank = 1 - (n ** 2 + t) / n
        return np.where(n <= s, 1 - (s ** 2 + t) / s, np.where(n <= r, flank, 0.0))

    def z(x):
        x = np.atleast_2d(x)
        n = _norm(x)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            mid = -x / n
            out = -x * r / n ** 2
        return np.where(n <= s, -x / s, np.where(n <= r, mid, out))

    def div_z(x):
        n = _norm(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            mid = -1 / n
        return np.where(n <= s, -2 / s, np.where(n <= r, mid, 0.0))

    def g(x):
        return u(x) - div_z(x) / alpha

    return ExactSolution(u, z, div_z, g, alpha, ((-1.5, 1.5), (-1.5, 1.5)), True)


def square_data(half_width=0.5):
    def g(x):
        x = np.atleast_2d(x)
        return np.all(np.abs(x) <= half_width, axis=1).astype(float)
    return g


# ------------------------------------------------------------------ images

@dataclass
class ImageData:
    """Grayscale image with values in [0, 1]; row 0 is the top row."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(self.height, self.width)
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def lookup(self, x):
        """Nearest-pixel value at points of the unit square."""
        x = np.atleast_2d(x)
        col = np.clip(np.floor(x[:, 0] * self.width).astype(np.int64), 0, self.width - 1)
        row = np.clip(np.floor((1 - x[:, 1]) * self.height).astype(np.int64), 0, self.height - 1)
        return self.pixels[row, col]


def synthetic_image(size=256, noise=0.0, seed=0) -> ImageData:
    """Piecewise constant test image: background, disc, rectangle, triangle and ring.

    ``noise`` adds clipped Gaussian noise of that standard deviation.
    """
    n = size
    c = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(c, 1 - c)                       # Y is the upward coordinate
    img = np.full((n, n), 0.2)
    img[(X - 0.32) ** 2 + (Y - 0.66) ** 2 < 0.17 ** 2] = 0.9
    img[(X > 0.55) & (X < 0.88) & (Y > 0.52) & (Y < 0.8)] = 0.6
    tri = (Y > 0.12) & (Y < 0.12 + 1.2 * (X - 0.1)) & (Y < 0.12 + 1.2 * (0.5 - X))
    img[tri] = 0.75
    ring = np.hypot(X - 0.72, Y - 0.25)
    img[(ring > 0.08) & (ring < 0.15)] = 0.0
    img[ring <= 0.08] = 1.0
    if noise > 0:
        rng = np.random.default_rng(seed)
        img = np.clip(img + noise * rng.standard_normal(img.shape), 0, 1)
    return ImageData(n, n, img)


def _levels_for(mesh: Triangulation, resolution):
    """Composite-rule refinement depth so that sub-elements reach ``resolution``."""
    ratio = mesh.diameters / resolution
    return np.clip(np.ceil(np.log2(np.maximum(ratio, 1.0))).astype(int) + 1, 1, 6)


def integrate_resolved(mesh: Triangulation, f, resolution, order=2):
    """Per-element integrals of a pointwise callback that varies on the scale ``resolution``.

    Each element gets a composite rule whose sub-elements are about as
    small as ``resolution``.
    """
    levels = _levels_for(mesh, resolution)
    out = np.zeros(mesh.n_elements)
    for k in np.unique(levels):
        el = np.flatnonzero(levels == k)
        x, w, _ = quad_points(mesh, order, int(k), elements=el)
        vals = np.asarray(f(x.reshape(-1, mesh.dim)), dtype=float).reshape(w.shape)
        out[el] = (vals * w).sum(axis=1)
    return out


def image_projector(img: ImageData):
    pix = 1.0 / max(img.width, img.height)
    return lambda mesh: P0Function(mesh, integrate_resolved(mesh, img.lookup, pix) / mesh.volumes)


def image_to_problem(img: ImageData, alpha=1e4, mesh_subdivisions=8, eps=None):
    """Denoising problem on the unit square with nearest-pixel data.

    Returns a :class:`ProblemSpec` (for the adaptive loop); with ``eps``
    given a ready :class:`RofProblem` on the initial mesh is returned.
    """
    mesh = uniform_triangulation([(0, 1), (0, 1)], mesh_subdivisions, dirichlet=False)
    spec = ProblemSpec(mesh, float(alpha), img.lookup, None, image_projector(img),
                       estimator_exact_g=False, name="image")
    if eps is None:
        return spec
    from .rof import RofProblem
    e = np.broadcast_to(np.asarray(eps, dtype=float), (mesh.n_elements,)).copy()
    return RofProblem(mesh, float(alpha), spec.g_h(mesh), P0Function(mesh, e), img.lookup)


def image_error(u, img: ImageData):
    """Squared L2 distance between a CR function and the image data."""
    from .fem import cr_eval
    mesh = u.mesh
    pix = 1.0 / max(img.width, img.height)
    levels = _levels_for(mesh, pix)
    total = 0.0
    for k in np.unique(levels):
        el = np.flatnonzero(levels == k)
        x, w, lam = quad_points(mesh, 2, int(k), elements=el)
        vals = cr_eval(u, lam, elements=el)
        g = img.lookup(x.reshape(-1, 2)).reshape(w.shape)
        total += float(((vals - g) ** 2 * w).sum())
    return total


def rasterize(u, width, height):
    """Sample a 2D CR function on the pixel centres of the unit square."""
    from matplotlib.tri import Triangulation as MplTri
    mesh = u.mesh
    tri = MplTri(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.elements)
    finder = tri.get_trifinder()
    cx = (np.arange(width) + 0.5) / width
    cy = 1 - (np.arange(height) + 0.5) / height
    X, Y = np.meshgrid(cx, cy)
    el = finder(X.ravel(), Y.ravel())
    if np.any(el < 0):
        raise ValueError("pixel centres outside the mesh")
    P = mesh.vertices[mesh.elements[el]]
    pts = np.column_stack([X.ravel(), Y.ravel()])
    G = mesh.barycentric_gradients[el]
    lam = np.empty((len(el), 3))
    lam[:, 1:] = np.einsum("nkd,nd->nk", G[:, 1:], pts - P[:, 0])
    lam[:, 0] = 1 - lam[:, 1:].sum(axis=1)
    loc = u.dofs[mesh.element_sides[el]]
    vals = loc.sum(axis=1) - 2 * np.einsum("nj,nj->n", loc, lam)
    return vals.reshape(height, width)


# ------------------------------------------------------------------ registry

BENCHMARKS = ("one_disk_2d", "one_disk_3d", "two_disks", "cone", "square", "image")


def benchmark(name, quad_order=3, quad_subdivide=2, image=None, image_subdivisions=8) -> ProblemSpec:
    """Problem specification of a named benchmark.

    Parameters
    ----------
    name : str
        One of ``BENCHMARKS``.
    quad_subdivide : int
        Composite refinement of the quadrature for the discontinuous data.
    image : ImageData, optional
        Data for ``"image"``; the synthetic image by default.
    """
    if name == "one_disk_2d":
        ex = one_disk(2)
        mesh = uniform_triangulation(ex.domain, 4, dirichlet=True)
    elif name == "one_disk_3d":
        ex = one_disk(3)
        mesh = uniform_triangulation(ex.domain, 3, dirichlet=True)
        quad_subdivide = min(quad_subdivide, 1)
    elif name == "two_disks":
        ex = two_disks()
        mesh = uniform_triangulation(ex.domain, 4, dirichlet=True)
    elif name == "cone":
        ex = cone()
        mesh = uniform_triangulation(ex.domain, 4, dirichlet=True)
    elif name == "square":
        mesh = uniform_triangulation([(-1, 1), (-1, 1)], 4, dirichlet=False)
        return ProblemSpec(mesh, 100.0, square_data(0.5), None, None, quad_order, quad_subdivide,
                           name=name)
    elif name == "image":
        img = image if image is not None else synthetic_image()
        spec = image_to_problem(img, 1e4, image_subdivisions)
        spec.name = name
        return spec
    else:
        raise KeyError(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}")
    return ProblemSpec(mesh, ex.alpha, ex.g, ex, None, quad_order, quad_subdivide, name=name)
