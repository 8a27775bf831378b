"""Scikit-learn style front end for adaptive TV denoising of grayscale images."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .afem import AfemConfig, afem_run
from .benchmarks import ImageData, image_error, image_to_problem, rasterize


def check_image(X, ensure_unit_range=True):
    """Validate one image (H, W) or a stack of images (n, H, W).

    Returns a float array of shape (n, H, W).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected an image of shape (H, W) or a stack (n, H, W), got shape {X.shape}")
    if min(X.shape[1:]) < 2:
        raise ValueError("images need at least 2 pixels per direction")
    if not np.all(np.isfinite(X)):
        raise ValueError("images must not contain NaN or inf")
    if ensure_unit_range and (X.min() < 0 or X.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


class AdaptiveTVDenoiser(TransformerMixin, BaseEstimator):
    """Denoise images by adaptive Crouzeix-Raviart finite elements.

    Each image is mapped to the unit square, the regularized ROF problem is
    solved on an adaptively refined mesh and the discrete solution is
    sampled at the pixel centres. The method is transductive: ``fit`` runs
    the adaptive loop on the given images and ``transform`` returns the
    stored result for the same images (or solves anew for different ones).

    Parameters
    ----------
    alpha : float
        Fidelity weight.
    levels : int
        Number of adaptive levels.
    theta : float in (0, 1]
        Marking parameter.
    eps_strategy : {"global", "local"}
    mesh_subdivisions : int
        Squares per side of the initial mesh.

    Attributes
    ----------
    levels_ : list of list of AfemLevel
        Per image, the levels of the adaptive run.
    errors_ : ndarray
        Squared L2 distance of each final solution to its image.
    n_vertices_ : ndarray
        Vertex counts of the final meshes.
    """

    def __init__(self, alpha=1e4, levels=10, theta=0.5, eps_strategy="global", mesh_subdivisions=8):
        self.alpha = alpha
        self.levels = levels
        self.theta = theta
        self.eps_strategy = eps_strategy
        self.mesh_subdivisions = mesh_subdivisions

    def _check_params(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if int(self.levels) < 1:
            raise ValueError("levels must be >= 1")
        if int(self.mesh_subdivisions) < 1:
            raise ValueError("mesh_subdivisions must be >= 1")
        return AfemConfig(theta=float(self.theta), eps_strategy=self.eps_strategy, max_levels=int(self.levels))

    def _solve(self, X):
        cfg = self._check_params()
        runs, out, err = [], [], []
        for px in X:
            img = ImageData(px.shape[1], px.shape[0], px)
            lv = afem_run(image_to_problem(img, float(self.alpha), int(self.mesh_subdivisions)), cfg)
            runs.append(lv)
            out.append(rasterize(lv[-1].u, img.width, img.height))
            err.append(image_error(lv[-1].u, img))
        return runs, np.stack(out), np.asarray(err)

    def fit(self, X, y=None):
        """Run the adaptive loop on each image."""
        X = check_image(X)
        self.levels_, self._result, self.errors_ = self._solve(X)
        self._fitted_on = X.copy()
        self.n_vertices_ = np.array([lv[-1].n_vertices for lv in self.levels_])
        self.image_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        """Denoised images, same shape as ``X``."""
        check_is_fitted(self, "levels_")
        squeeze = np.asarray(X).ndim == 2
        X = check_image(X)
        if X.shape == self._fitted_on.shape and np.array_equal(X, self._fitted_on):
            res = self._result
        else:
            _, res, _ = self._solve(X)
        return res[0] if squeeze else res

    def score(self, X, y=None):
        """Negative mean squared L2 error of the denoised images against ``X``."""
        check_is_fitted(self, "levels_")
        X = check_image(X)
        if X.shape == self._fitted_on.shape and np.array_equal(X, self._fitted_on):
            return -float(self.errors_.mean())
        _, _, err = self._solve(X)
        return -float(err.mean())
