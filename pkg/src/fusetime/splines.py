"""Clamped uniform B-spline basis on the unit interval.

The basis carries the time dimension of every coefficient curve in this
package: a curve is evaluated as ``control_points.T @ b(v)`` where ``b(v)``
holds the M basis function values at a normalized time point v in [0, 1].

Conventions
-----------
- ``degree`` d >= 1 and ``interior_knots`` M* >= 1 give M = M* + d + 1 basis
  functions over the knot sequence 0 = v_{-d} = ... = v_0 < v_1 < ... <
  v_{M*} < v_{M*+1} = ... = v_M = 1 with equidistant interior knots
  v_m = m / (M* + 1).
- Values are computed with the two-term de Boor recurrence

      b_{m,j}(v) = a_{m,j}(v) b_{m,j-1}(v) + [1 - a_{m+1,j}(v)] b_{m+1,j-1}(v),
      a_{m,j}(v) = (v - v_m) / (v_{m+j} - v_m)  when v_{m+j} != v_m, else 0,

  never by solving a linear system.
- The final nonempty knot interval is treated as right-closed, so
  ``eval_basis(..., 1.0)`` returns the last unit vector exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SplineConfig:
    """Degree and interior-knot count of the basis.

    Parameters
    ----------
    degree : int
        Piecewise-polynomial degree d, at least 1.
    interior_knots : int
        Number of interior knots M*, at least 1.
    """

    degree: int
    interior_knots: int

    def __post_init__(self) -> None:
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        if self.interior_knots < 1:
            raise ValueError(
                f"interior_knots must be >= 1, got {self.interior_knots}"
            )

    @property
    def basis_size(self) -> int:
        """Number of basis functions M = M* + d + 1."""
        return self.interior_knots + self.degree + 1


def build_knots(config: SplineConfig) -> np.ndarray:
    """Return the clamped uniform knot vector for `config`.

    The result has M + d + 1 entries: d+1 zeros, the M* equidistant
    interior knots m/(M*+1), and d+1 ones.

    Examples
    --------
    >>> build_knots(SplineConfig(degree=2, interior_knots=2))
    array([0.        , 0.        , 0.        , 0.33333333, 0.66666667,
           1.        , 1.        , 1.        ])
    """
    d = config.degree
    mstar = config.interior_knots
    interior = np.arange(1, mstar + 1) / (mstar + 1)
    return np.concatenate([np.zeros(d + 1), interior, np.ones(d + 1)])


def basis_matrix(knots: np.ndarray, degree: int, v: np.ndarray) -> np.ndarray:
    """Evaluate all M basis functions at each point of `v`.

    Parameters
    ----------
    knots : ndarray
        Knot vector from :func:`build_knots` (length M + degree + 1).
    degree : int
        Spline degree d.
    v : ndarray
        Evaluation points, each in [0, 1].

    Returns
    -------
    ndarray of shape (len(v), M)
        Row ``g`` holds b(v[g]); rows sum to one and are nonnegative.

    Raises
    ------
    ValueError
        If any point lies outside [0, 1].
    """
    t = np.asarray(knots, dtype=float)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("evaluation points must lie in [0, 1]")

    n_basis = t.size - degree - 1
    # Degree-0 layer: indicators of the half-open knot intervals, with the
    # final nonempty interval [v_{M*}, 1] right-closed so b(1) = e_M.
    b = ((v[:, None] >= t[None, :-1]) & (v[:, None] < t[None, 1:])).astype(float)
    b[v == t[-1], n_basis - 1] = 1.0

    for j in range(1, degree + 1):
        n = b.shape[1] - 1
        left_den = t[j : j + n] - t[:n]
        right_den = t[j + 1 : j + 1 + n] - t[1 : 1 + n]
        # 0/0 convention: a coefficient with coincident knots contributes 0.
        with np.errstate(divide="ignore", invalid="ignore"):
            a_left = np.where(
                left_den > 0.0, (v[:, None] - t[None, :n]) / left_den, 0.0
            )
            a_right = np.where(
                right_den > 0.0,
                (v[:, None] - t[None, 1 : 1 + n]) / right_den,
                0.0,
            )
        b = a_left * b[:, :n] + (1.0 - a_right) * b[:, 1:]
    return b


def eval_basis(knots: np.ndarray, degree: int, v: float) -> np.ndarray:
    """Evaluate the basis vector b(v) at a single point.

    Returns an array of length M. See :func:`basis_matrix` for the batched
    form used when building designs.

    Examples
    --------
    >>> k = build_knots(SplineConfig(degree=2, interior_knots=2))
    >>> eval_basis(k, 2, 0.0)
    array([1., 0., 0., 0., 0.])
    >>> eval_basis(k, 2, 0.5)
    array([0.   , 0.125, 0.75 , 0.125, 0.   ])
    """
    return basis_matrix(knots, degree, np.asarray([v]))[0]


def eval_curve(control_points: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Evaluate a coefficient curve: returns ``control_points.T @ basis``.

    Parameters
    ----------
    control_points : ndarray of shape (M, p)
        One column of control points per coefficient.
    basis : ndarray of shape (M,)
        Basis vector b(v) at the evaluation point.

    Returns
    -------
    ndarray of shape (p,)
        The curve value; for control points with identical rows c the
        result is c by partition of unity.
    """
    control_points = np.asarray(control_points, dtype=float)
    basis = np.asarray(basis, dtype=float)
    if control_points.ndim != 2 or control_points.shape[0] != basis.shape[0]:
        raise ValueError(
            f"control points with {control_points.shape} rows do not match "
            f"basis of length {basis.shape[0]}"
        )
    return control_points.T @ basis
