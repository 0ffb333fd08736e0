"""Cubic B-spline bases with quantile knots and curvature penalties.

The penalty matrix integrates products of second derivatives exactly:
for cubic splines the integrand is piecewise quadratic, so two-point
Gauss-Legendre quadrature on each knot span is exact.
"""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline, splev

from .errors import TooFewDistinctValues

DEGREE = 3

_GAUSS_NODES = np.array([-1.0, 1.0]) / np.sqrt(3.0)
_GAUSS_WEIGHTS = np.array([1.0, 1.0])


@dataclass(frozen=True)
class SplineBasis:
    """A fixed cubic B-spline basis on [knots[3], knots[-4]]."""

    knots: np.ndarray

    @property
    def nbasis(self):
        return len(self.knots) - DEGREE - 1

    @property
    def domain(self):
        return float(self.knots[DEGREE]), float(self.knots[-DEGREE - 1])

    def design(self, x, clamp=True):
        """Evaluate all basis functions at x; rows sum to one inside the domain."""
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return np.empty((0, self.nbasis))
        lo, hi = self.domain
        if clamp:
            x = np.clip(x, lo, hi)
        elif np.any((x < lo) | (x > hi)):
            raise ValueError(f"points outside spline domain [{lo}, {hi}]")
        return BSpline.design_matrix(x, self.knots, DEGREE, extrapolate=False).toarray()

    def penalty(self):
        """Integrated squared-second-derivative penalty matrix (m x m, PSD)."""
        m = self.nbasis
        spans = np.unique(self.knots)
        S = np.zeros((m, m))
        coef = np.eye(m)
        for a, b in zip(spans[:-1], spans[1:]):
            if b <= a:
                continue
            half = (b - a) / 2.0
            nodes = (a + b) / 2.0 + half * _GAUSS_NODES
            D = np.empty((len(nodes), m))
            for j in range(m):
                D[:, j] = splev(nodes, (self.knots, coef[j], DEGREE), der=2)
            S += (D.T * (_GAUSS_WEIGHTS * half)) @ D
        return (S + S.T) / 2.0

    def greville(self):
        """Greville abscissae: coefficients c_i = g(greville_i) represent any linear g exactly."""
        t = self.knots
        return np.array([t[i + 1:i + DEGREE + 1].mean() for i in range(self.nbasis)])


def build_basis(x, m):
    """Quantile-knot basis of dimension m (>= 4) for the observed values x."""
    if m < 4:
        raise ValueError(f"basis dimension must be >= 4, got {m}")
    x = np.asarray(x, dtype=float)
    distinct = np.unique(x[np.isfinite(x)])
    if distinct.size < m:
        raise TooFewDistinctValues(
            f"need at least {m} distinct values to build an m={m} basis, got {distinct.size}")
    lo, hi = distinct[0], distinct[-1]
    n_interior = m - DEGREE - 1
    if n_interior > 0:
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.quantile(distinct, probs)
        eps = 1e-12 * max(1.0, abs(hi - lo))
        if np.any(np.diff(np.concatenate([[lo], interior, [hi]])) <= eps):
            raise TooFewDistinctValues("quantile knots collide; data too concentrated for this basis size")
    else:
        interior = np.empty(0)
    knots = np.concatenate([np.repeat(lo, DEGREE + 1), interior, np.repeat(hi, DEGREE + 1)])
    return SplineBasis(knots=knots)


def tensor_design(basis_1, basis_2, x1, x2, clamp=True):
    """Row-wise tensor product design: columns ordered (i1 major, i2 minor)."""
    B1 = basis_1.design(x1, clamp=clamp)
    B2 = basis_2.design(x2, clamp=clamp)
    n = B1.shape[0]
    return (B1[:, :, None] * B2[:, None, :]).reshape(n, -1)


def tensor_penalty(S1, S2):
    """Additive marginal curvature penalty for a tensor-product block."""
    m1 = S1.shape[0]
    m2 = S2.shape[0]
    return np.kron(S1, np.eye(m2)) + np.kron(np.eye(m1), S2)
