"""Clamped B-spline bases in one and two dimensions.

Evaluation uses the Cox-de Boor recursion; derivatives come from the
standard difference recurrence. With a clamped knot vector of degree ``d``
and ``q`` interior knots there are ``q + d + 1`` basis functions, they are
nonnegative, and they sum to one everywhere on the domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


def _basis_all(knots: np.ndarray, degree: int, t: np.ndarray) -> np.ndarray:
    """All basis function values at the points ``t``, shape (n, K)."""
    K = len(knots) - degree - 1
    t = np.asarray(t, dtype=float)
    n = t.size
    span = np.searchsorted(knots, t, side="right") - 1
    span = np.clip(span, degree, K - 1)

    N = np.zeros((n, degree + 1))
    N[:, 0] = 1.0
    left = np.zeros((n, degree + 1))
    right = np.zeros((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = t - knots[span + 1 - j]
        right[:, j] = knots[span + j] - t
        saved = np.zeros(n)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.where(denom > 0, N[:, r] / np.where(denom > 0, denom, 1.0), 0.0)
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved

    out = np.zeros((n, K))
    cols = span[:, None] + np.arange(-degree, 1)[None, :]
    np.put_along_axis(out, cols, N, axis=1)
    return out


def _basis_deriv(knots: np.ndarray, degree: int, t: np.ndarray, deriv: int) -> np.ndarray:
    """Derivative-of-order-``deriv`` values of all basis functions."""
    K = len(knots) - degree - 1
    if deriv == 0:
        return _basis_all(knots, degree, t)
    if deriv > degree:
        return np.zeros((np.asarray(t).size, K))
    lower = _basis_deriv(knots, degree - 1, t, deriv - 1)  # (n, K + 1)
    d1 = knots[degree : degree + K] - knots[:K]
    d2 = knots[degree + 1 : degree + K + 1] - knots[1 : K + 1]
    inv1 = np.where(d1 > 0, 1.0 / np.where(d1 > 0, d1, 1.0), 0.0)
    inv2 = np.where(d2 > 0, 1.0 / np.where(d2 > 0, d2, 1.0), 0.0)
    return degree * (lower[:, :K] * inv1 - lower[:, 1 : K + 1] * inv2)


@dataclass(frozen=True)
class SplineBasis1D:
    """A clamped univariate B-spline basis.

    Parameters
    ----------
    knots : ndarray
        Full nondecreasing knot vector including the ``degree + 1``
        repeated boundary knots at each end.
    degree : int
        Polynomial degree, at least 1 for evaluation; curvature penalties
        additionally require at least 2.
    """

    knots: np.ndarray
    degree: int = 3

    def __post_init__(self):
        kn = np.array(self.knots, dtype=float)
        if self.degree < 1:
            raise InputError("spline degree must be at least 1")
        if kn.ndim != 1 or len(kn) < 2 * (self.degree + 1):
            raise InputError("knot vector too short for the requested degree")
        if np.any(np.diff(kn) < 0):
            raise InputError("knot vector must be nondecreasing")
        if kn[self.degree] >= kn[-self.degree - 1]:
            raise InputError("knot vector has an empty domain")
        kn.setflags(write=False)
        object.__setattr__(self, "knots", kn)

    @classmethod
    def uniform(cls, t_min: float, t_max: float, num_basis: int = 10, degree: int = 3):
        """Equally spaced interior knots on ``[t_min, t_max]``.

        ``num_basis`` is the number of basis functions; it must be at least
        ``degree + 1``.
        """
        if t_max <= t_min:
            raise InputError("domain must have positive length")
        n_interior = num_basis - degree - 1
        if n_interior < 0:
            raise InputError(
                f"num_basis={num_basis} too small for degree {degree}"
            )
        interior = np.linspace(t_min, t_max, n_interior + 2)[1:-1]
        knots = np.concatenate(
            [np.full(degree + 1, t_min), interior, np.full(degree + 1, t_max)]
        )
        return cls(knots, degree)

    @property
    def num_basis(self) -> int:
        return len(self.knots) - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[self.degree]), float(self.knots[-self.degree - 1])

    def design_matrix(self, t, deriv: int = 0, clamp: bool = False) -> np.ndarray:
        """Evaluate all basis functions (or a derivative) at ``t``.

        Points outside the domain raise unless ``clamp`` is set, in which
        case they are moved to the nearest endpoint first.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.domain
        if clamp:
            t = np.clip(t, lo, hi)
        elif np.any(t < lo) or np.any(t > hi):
            raise InputError(
                f"evaluation point outside basis domain [{lo}, {hi}]"
            )
        return _basis_deriv(self.knots, self.degree, t, deriv)

    def greville(self) -> np.ndarray:
        """Knot averages; a linear function f has coefficients f(greville)."""
        d = self.degree
        return np.array(
            [self.knots[i + 1 : i + d + 1].mean() for i in range(self.num_basis)]
        )

    def to_dict(self) -> dict:
        return {"degree": self.degree, "knots": [float(k) for k in self.knots]}

    @classmethod
    def from_dict(cls, doc: dict) -> "SplineBasis1D":
        degree = int(doc.get("degree", 3))
        if "knots" in doc:
            return cls(np.asarray(doc["knots"], dtype=float), degree)
        try:
            lo, hi = float(doc["t_min"]), float(doc["t_max"])
        except KeyError as e:
            raise InputError(f"spline basis needs 'knots' or 't_min'/'t_max': missing {e}")
        return cls.uniform(lo, hi, int(doc.get("num_basis", 10)), degree)


@dataclass(frozen=True)
class SplineBasis2D:
    """A tensor-product surface basis: one 1-D basis per axis.

    Basis function ``k = i * basis_y.num_basis + j`` is the product of the
    i-th x-axis function and the j-th y-axis function.
    """

    basis_x: SplineBasis1D
    basis_y: SplineBasis1D

    @classmethod
    def uniform(cls, x_range, y_range, num_basis=(8, 8), degree: int = 3):
        bx = SplineBasis1D.uniform(x_range[0], x_range[1], num_basis[0], degree)
        by = SplineBasis1D.uniform(y_range[0], y_range[1], num_basis[1], degree)
        return cls(bx, by)

    @property
    def num_basis(self) -> int:
        return self.basis_x.num_basis * self.basis_y.num_basis

    def design_matrix(self, x, y, clamp: bool = False) -> np.ndarray:
        """Evaluate all products at paired points, shape (n, num_basis)."""
        Bx = self.basis_x.design_matrix(x, clamp=clamp)
        By = self.basis_y.design_matrix(y, clamp=clamp)
        n = Bx.shape[0]
        return np.einsum("ni,nj->nij", Bx, By).reshape(n, -1)

    def to_dict(self) -> dict:
        return {"x": self.basis_x.to_dict(), "y": self.basis_y.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "SplineBasis2D":
        return cls(
            SplineBasis1D.from_dict(doc["x"]), SplineBasis1D.from_dict(doc["y"])
        )


def bspline_basis_1d(t: float, basis: SplineBasis1D) -> np.ndarray:
    """Basis function values at a single point, shape (num_basis,)."""
    return basis.design_matrix(t)[0]
