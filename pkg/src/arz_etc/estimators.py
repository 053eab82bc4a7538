"""scikit-learn facade for the backstepping transform.

``BacksteppingTransformer`` maps flattened Riemann-variable states
``(w1, w2, w3, w4)`` sampled on the grid to target states
``(alpha1, alpha2, alpha3, beta)`` and back. ``fit`` ignores its data except
for the shape check; it solves the kernels of the configured equilibrium.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .kernels import forward_transform, inverse_transform, solve_kernels
from .model import PER_KM, compute_equilibrium, linearize, paper_params


class BacksteppingTransformer(TransformerMixin, BaseEstimator):
    """Volterra transform of the linearized road at one equilibrium.

    Parameters are in traffic units: densities in veh/km, spacing in m.
    """

    def __init__(self, rho_h=110.0, rho_a=95.0, spacing_a=15.0, nx=100):
        self.rho_h = rho_h
        self.rho_a = rho_a
        self.spacing_a = spacing_a
        self.nx = nx

    def fit(self, X=None, y=None):
        params = paper_params(spacing_a=float(self.spacing_a))
        eq = compute_equilibrium(self.rho_h * PER_KM, self.rho_a * PER_KM, params)
        self.system_ = linearize(eq, params, nx=int(self.nx))
        self.kernels_ = solve_kernels(self.system_)
        self.n_features_in_ = 4 * (int(self.nx) + 1)
        if X is not None:
            self._check(X)
        return self

    def _check(self, X):
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features (4 fields x {self.nx + 1} nodes), "
                             f"got {X.shape[1]}")
        return X.reshape(X.shape[0], 4, -1)

    def transform(self, X):
        check_is_fitted(self, "kernels_")
        out = []
        for w in self._check(X):
            a, b = forward_transform(w[:3], w[3], self.kernels_)
            out.append(np.concatenate([a.ravel(), b]))
        return np.array(out)

    def inverse_transform(self, X):
        check_is_fitted(self, "kernels_")
        out = []
        for t in self._check(X):
            wp, wm = inverse_transform(t[:3], t[3], self.kernels_)
            out.append(np.concatenate([wp.ravel(), wm]))
        return np.array(out)
