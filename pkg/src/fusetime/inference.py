"""Pointwise standard errors for the refitted group coefficient curves.

Covariance construction
-----------------------
For group k with members ``G_k`` (``N_k`` units, average observation count
``T_bar``), let ``z_it`` denote the demeaned sieve regressors, ``eps_it`` the
refit residuals, and ``M`` the basis size. The long-run middle matrix is

    E_hat = E0 + sum_{h=1}^{H} w(h) (E_h + E_h'),
    E_h   = (M / N_k) * sum_{i in G_k} (1 / T_i) *
            sum_{(t, t-h) both observed} z_it z_{i,t-h}' eps_it eps_{i,t-h},

with Bartlett weights ``w(h) = 1 - h / (H + 1)``. With

    Q_hat  = sum_{i in G_k} (1 / T_i) * sum_t z_it z_it',
    nu(v)  = (M * Q_hat / N_k)^{-1} (I_p kron b(v)),

the curve covariance at v is ``Omega(v) = nu(v)' E_hat nu(v)`` and the
standard error of coefficient j is

    SE_j(v) = sqrt( Omega(v)_jj * M / (N_k * T_bar) ).

``Omega`` is symmetrized and its negative eigenvalues are clipped at zero
before the square root, so reported variances are never negative.

The lag index runs over calendar distance h: for incompletely observed
units only period pairs (t, t-h) that are both present contribute, and the
per-unit averages use that unit's own observation count.

All matrices are assembled in the design's identified coordinates (blocks
of within-constant regressors carry no level information) and mapped back
to the full M*p layout through the design's orthonormal reduction. For a
level-free block the reported curve, and hence the band, refers to the
sum-zero representative; level shifts of such a curve are not estimable
and carry no standard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grouping import GroupedFit
from .panel import SieveDesign
from .splines import eval_basis


@dataclass(frozen=True)
class HacConfig:
    """Long-run variance settings: lag window and kernel.

    Parameters
    ----------
    window : int
        Number of lags H >= 0 entering the weighted sum. Must be smaller
        than the panel's time dimension.
    kernel : str
        Only "bartlett" is implemented: w(h) = 1 - h/(H+1), which is 1 at
        h=0, decays linearly, and is 0 beyond the window.
    """

    window: int
    kernel: str = "bartlett"

    def __post_init__(self):
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.kernel != "bartlett":
            raise ValueError(f"unknown kernel {self.kernel!r}")

    def weight(self, h: int) -> float:
        if h == 0:
            return 1.0
        if h > self.window:
            return 0.0
        return 1.0 - h / (self.window + 1.0)


def default_window(t_bar: float) -> int:
    """Standard plug-in lag choice floor(4 * (T/100)^(2/9))."""
    if t_bar <= 0:
        raise ValueError("t_bar must be positive")
    return int(math.floor(4.0 * (t_bar / 100.0) ** (2.0 / 9.0)))


def _lagged_cross(z: np.ndarray, resid: np.ndarray, periods: np.ndarray, h: int):
    """Sum of z_t z_{t-h}' e_t e_{t-h} over pairs observed h periods apart."""
    if h == 0:
        zr = z * resid[:, None]
        return zr.T @ zr
    pos = np.searchsorted(periods, periods - h)
    pos = np.clip(pos, 0, len(periods) - 1)
    valid = periods[pos] == periods - h
    if not np.any(valid):
        return np.zeros((z.shape[1], z.shape[1]))
    cur = np.flatnonzero(valid)
    lag = pos[cur]
    zr_cur = z[cur] * resid[cur, None]
    zr_lag = z[lag] * resid[lag, None]
    return zr_cur.T @ zr_lag


def hac_meat(
    design: SieveDesign, fit: GroupedFit, k: int, hac: HacConfig
) -> np.ndarray:
    """Bartlett-weighted long-run middle matrix E_hat for group k."""
    if hac.window >= design.global_t:
        raise ValueError(
            f"window {hac.window} must be smaller than the time dimension "
            f"{design.global_t}"
        )
    members = fit.partition.members(k)
    if members.size == 0:
        raise IndexError(f"group index {k} out of range")
    m = design.basis_size
    n_k = members.size
    red = design.reduction
    q_a = design.n_active

    meat_a = np.zeros((q_a, q_a))
    for h in range(hac.window + 1):
        e_h = np.zeros((q_a, q_a))
        for i in members:
            contrib = _lagged_cross(
                design.z[i] @ red, fit.residuals[i], design.observed[i], h
            )
            e_h += contrib / design.z[i].shape[0]
        e_h *= m / n_k
        if h == 0:
            meat_a += e_h
        else:
            meat_a += hac.weight(h) * (e_h + e_h.T)
    return red @ meat_a @ red.T


@dataclass(frozen=True)
class CoefCovariance:
    """Curve covariance for one group on a grid of basis arguments.

    Attributes
    ----------
    group : int
        Group index the matrices refer to.
    grid : np.ndarray
        Basis arguments v in [0, 1], one per covariance matrix.
    omega : np.ndarray
        (len(grid), p, p) symmetric PSD covariance matrices Omega(v).
    meat : np.ndarray
        The (Mp, Mp) long-run middle matrix shared by all grid points,
        mapped back from the identified coordinates.
    nu : np.ndarray
        (len(grid), Mp, p) solved factors nu(v); rows of a level-free block
        sum to zero.
    scale : float
        M / (N_k * T_bar); SEs are sqrt(diag(omega) * scale).
    """

    group: int
    grid: np.ndarray
    omega: np.ndarray
    meat: np.ndarray
    nu: np.ndarray
    scale: float

    def stderr(self) -> np.ndarray:
        """(len(grid), p) standard errors."""
        diags = np.diagonal(self.omega, axis1=1, axis2=2)
        return np.sqrt(diags * self.scale)


def _psd_clip(omega: np.ndarray) -> np.ndarray:
    omega = 0.5 * (omega + omega.T)
    eigval, eigvec = np.linalg.eigh(omega)
    if eigval[0] >= 0.0:
        return omega
    eigval = np.clip(eigval, 0.0, None)
    repaired = (eigvec * eigval) @ eigvec.T
    return 0.5 * (repaired + repaired.T)


def coef_covariance(
    design: SieveDesign, fit: GroupedFit, k: int, grid, hac: HacConfig
) -> CoefCovariance:
    """Omega(v) = nu(v)' E_hat nu(v) for each v in `grid`, PSD-repaired."""
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    members = fit.partition.members(k)
    if members.size == 0:
        raise IndexError(f"group index {k} out of range")
    n_k = members.size
    m = design.basis_size
    p = design.n_covariates
    red = design.reduction
    t_bar = float(np.mean([design.z[i].shape[0] for i in members]))

    q_a = design.n_active
    q_hat = np.zeros((q_a, q_a))
    for i in members:
        za = design.z[i] @ red
        q_hat += za.T @ za / za.shape[0]
    bread = m * q_hat / n_k

    meat = hac_meat(design, fit, k, hac)
    meat_a = red.T @ meat @ red
    nu = np.empty((grid.size, design.n_coef, p))
    omega = np.empty((grid.size, p, p))
    for g, v in enumerate(grid):
        selector = np.kron(np.eye(p), eval_basis(design.knots, design.config.degree, v)[:, None])
        nu_v = np.linalg.solve(bread, red.T @ selector)
        nu[g] = red @ nu_v
        omega[g] = _psd_clip(nu_v.T @ meat_a @ nu_v)
    return CoefCovariance(
        group=k,
        grid=grid,
        omega=omega,
        meat=meat,
        nu=nu,
        scale=m / (n_k * t_bar),
    )


def coef_stderr(
    design: SieveDesign, fit: GroupedFit, k: int, v: float, hac: HacConfig
) -> np.ndarray:
    """Pointwise standard errors of group k's p coefficient curves at v."""
    cov = coef_covariance(design, fit, k, [v], hac)
    return cov.stderr()[0]
