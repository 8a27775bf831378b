"""Adaptive Crouzeix-Raviart finite elements for the Rudin-Osher-Fatemi model.

Modules
-------
linalg      sparse matrices and preconditioned CG
mesh        simplicial meshes and conforming refinement
fem         Crouzeix-Raviart, Raviart-Thomas and P0 spaces, quadrature, assembly
convex      regularized modulus, Fenchel conjugates and flux reconstruction
rof         regularized discrete ROF energy and its gradient flow
estimator   dual reconstruction and the primal-dual gap estimator
afem        the adaptive loop
benchmarks  problems with exact solutions and image data
io          PGM, VTK and CSV formats
"""
from .afem import AfemConfig, AfemLevel, ProblemSpec, afem_run, doerfler_mark, fitted_rate
from .benchmarks import BENCHMARKS, ImageData, benchmark, image_to_problem, synthetic_image
from .convex import Regularization, feps_conjugate, feps_eval
from .denoise import AdaptiveTVDenoiser
from .estimator import dual_report, eta_cr, marini_rof
from .fem import CrFunction, P0Function, RtField
from .mesh import Triangulation, refine, uniform_triangulation
from .rof import FlowConfig, RofProblem, solve_rof

__version__ = "0.1.0"

__all__ = [
    "AdaptiveTVDenoiser", "AfemConfig", "AfemLevel", "BENCHMARKS", "CrFunction", "FlowConfig",
    "ImageData", "P0Function", "ProblemSpec", "Regularization", "RofProblem", "RtField",
    "Triangulation", "afem_run", "benchmark", "doerfler_mark", "dual_report", "eta_cr",
    "feps_conjugate", "feps_eval", "fitted_rate", "image_to_problem", "marini_rof", "refine",
    "solve_rof", "synthetic_image", "uniform_triangulation",
]
