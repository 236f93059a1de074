"""Panel containers, the within-transformation, and sieve design matrices.

A :class:`Panel` stores one response vector and one regressor matrix per
unit together with the unit's observed global time indices (1-based), so
unbalanced panels are simply panels with gaps. :func:`build_design` turns a
panel into the demeaned regression system

    z_it = x_it  (Kronecker)  b(t / global_T),

demeaned per unit over that unit's observed periods. Time is always
normalized by the global calendar length, so curves of different units are
aligned on one clock even when their samples differ.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .splines import SplineConfig, basis_matrix, build_knots


class PanelFormatError(ValueError):
    """Raised when input data violates the long-format panel schema."""


@dataclass(frozen=True)
class Panel:
    """Long-format panel, one entry per unit.

    Fields
    ------
    unit_ids : labels used in input/output files, one per unit.
    y : per-unit response arrays, length T_i.
    x : per-unit regressor matrices, shape (T_i, p).
    observed : per-unit strictly increasing 1-based global time indices.
    global_t : the panel's calendar length T (largest observed index).
    """

    unit_ids: tuple
    y: tuple
    x: tuple
    observed: tuple
    global_t: int

    def __post_init__(self):
        n = len(self.unit_ids)
        if not (len(self.y) == len(self.x) == len(self.observed) == n):
            raise PanelFormatError("per-unit field lengths disagree")
        if n == 0:
            raise PanelFormatError("panel has no units")
        p = self.x[0].shape[1]
        for uid, yi, xi, obs in zip(self.unit_ids, self.y, self.x, self.observed):
            if len(yi) == 0:
                raise PanelFormatError(f"unit {uid!r} has no observations")
            if not (len(yi) == xi.shape[0] == len(obs)):
                raise PanelFormatError(f"unit {uid!r}: y, x, observed lengths disagree")
            if xi.shape[1] != p:
                raise PanelFormatError(f"unit {uid!r}: inconsistent regressor count")
            if obs.min() < 1 or obs.max() > self.global_t:
                raise PanelFormatError(
                    f"unit {uid!r}: time indices outside 1..{self.global_t}"
                )
            if np.any(np.diff(obs) <= 0):
                raise PanelFormatError(f"unit {uid!r}: time indices not increasing")

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_covariates(self) -> int:
        return self.x[0].shape[1]

    @property
    def obs_counts(self) -> np.ndarray:
        """Array of per-unit observation counts T_i."""
        return np.array([len(obs) for obs in self.observed])

    @property
    def total_obs(self) -> int:
        return int(self.obs_counts.sum())

    @property
    def is_balanced(self) -> bool:
        counts = self.obs_counts
        return bool(np.all(counts == self.global_t))


def panel_from_arrays(y: np.ndarray, x: np.ndarray, unit_ids=None) -> Panel:
    """Build a balanced Panel from dense arrays y (N, T) and x (N, T, p)."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    n, t = y.shape
    if unit_ids is None:
        unit_ids = tuple(range(1, n + 1))
    obs = np.arange(1, t + 1)
    return Panel(
        unit_ids=tuple(unit_ids),
        y=tuple(y[i].copy() for i in range(n)),
        x=tuple(x[i].copy() for i in range(n)),
        observed=tuple(obs.copy() for _ in range(n)),
        global_t=t,
    )


def load_csv(path, intercept_only: bool = False) -> Panel:
    """Read a long-format CSV into a Panel.

    Expected header: ``unit_id,time_index,y,x1,...,xp``. Rows may be missing
    (unbalanced panel); duplicate (unit, time) pairs are an error. With
    ``intercept_only`` the regressor is a single column of ones and any x
    columns in the file are ignored.

    Raises
    ------
    PanelFormatError
        On missing/invalid header, non-numeric fields, non-positive time
        indices, duplicate observations, or an empty file.
    """
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[:3] != ["unit_id", "time_index", "y"]:
            raise PanelFormatError(
                f"{path}: header must start with unit_id,time_index,y "
                f"(got {','.join(header[:3])})"
            )
        x_names = header[3:]
        expected = [f"x{j}" for j in range(1, len(x_names) + 1)]
        if x_names != expected:
            raise PanelFormatError(
                f"{path}: regressor columns must be x1..x{len(x_names)} in order"
            )
        if not x_names and not intercept_only:
            raise PanelFormatError(
                f"{path}: no regressor columns; pass intercept_only for a "
                "ones-regressor design"
            )
        n_fields = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != n_fields:
                raise PanelFormatError(
                    f"{path}:{lineno}: expected {n_fields} fields, got {len(row)}"
                )
            uid = row[0].strip()
            try:
                t_idx = int(row[1])
                vals = [float(f) for f in row[2:]]
            except ValueError:
                raise PanelFormatError(
                    f"{path}:{lineno}: non-numeric time_index or value"
                ) from None
            if t_idx < 1:
                raise PanelFormatError(
                    f"{path}:{lineno}: time_index must be a positive integer"
                )
            key = (uid, t_idx)
            if key in rows:
                raise PanelFormatError(
                    f"{path}:{lineno}: duplicate observation for unit "
                    f"{uid!r} at time {t_idx}"
                )
            rows[key] = vals
    if not rows:
        raise PanelFormatError(f"{path}: no data rows")

    unit_order = []
    seen = set()
    for uid, _ in rows:
        if uid not in seen:
            seen.add(uid)
            unit_order.append(uid)
    global_t = max(t for _, t in rows)

    ys, xs, obs_list = [], [], []
    for uid in unit_order:
        times = sorted(t for (u, t) in rows if u == uid)
        vals = np.array([rows[(uid, t)] for t in times], dtype=float)
        ys.append(vals[:, 0])
        if intercept_only:
            xs.append(np.ones((len(times), 1)))
        else:
            xs.append(vals[:, 1:])
        obs_list.append(np.array(times, dtype=int))
    return Panel(
        unit_ids=tuple(unit_order),
        y=tuple(ys),
        x=tuple(xs),
        observed=tuple(obs_list),
        global_t=global_t,
    )


def within(values: np.ndarray) -> np.ndarray:
    """Demean an array over its leading axis (one unit's observed periods)."""
    values = np.asarray(values, dtype=float)
    return values - values.mean(axis=0, keepdims=values.ndim > 1)


def _sum_zero_basis(m: int) -> np.ndarray:
    """Orthonormal basis of the sum-zero subspace of R^m, shape (m, m-1).

    Column k (1-based) is the Helmert contrast (1, ..., 1, -k, 0, ..., 0) /
    sqrt(k(k+1)): closed-form, so the basis is bitwise reproducible.
    """
    basis = np.zeros((m, m - 1))
    for k in range(1, m):
        scale = 1.0 / math.sqrt(k * (k + 1.0))
        basis[:k, k - 1] = scale
        basis[k, k - 1] = -k * scale
    return basis


@dataclass(frozen=True)
class SieveDesign:
    """Demeaned per-unit sieve regression system.

    ``z[i]`` has shape (T_i, M*p) with the Kronecker layout regressor-major,
    basis-minor: columns [0, M) belong to x1, columns [M, 2M) to x2, and so
    on, matching ``pi_i = vec(Pi_i)`` with the M x p control-point matrix
    stored column-wise.

    Blocks whose regressor is constant within every unit (an intercept, a
    time-invariant characteristic) are only identified up to a level: the
    basis functions sum to one, so the demeaned block columns sum to zero
    exactly and any constant shift of that block's curve is absorbed by the
    unit fixed effect. ``constant_regressors`` records those blocks.
    Solvers work in the identified coordinates ``z @ reduction`` and map
    estimates back through the same matrix, which makes every reported
    coefficient vector the minimum-norm representative of its level class:
    the M coefficients of each constant-regressor block sum to zero, exactly
    what a pseudo-inverse solve of the rank-deficient full system returns.
    Because the reduction is orthonormal, norms of (differences of) reported
    vectors equal the corresponding reduced-space norms, so penalty values
    and grouping distances are the identified ones with no dependence on an
    arbitrary level choice.
    """

    z: tuple
    y: tuple
    observed: tuple
    unit_ids: tuple
    global_t: int
    n_covariates: int
    config: SplineConfig
    knots: np.ndarray = field(repr=False)
    constant_regressors: tuple = ()

    @property
    def n_units(self) -> int:
        return len(self.z)

    @property
    def basis_size(self) -> int:
        return self.config.basis_size

    @property
    def n_coef(self) -> int:
        """Per-unit coefficient count q = M * p."""
        return self.basis_size * self.n_covariates

    @property
    def reduction(self) -> np.ndarray:
        """Orthonormal map (M*p, n_active) onto identified coordinates.

        Identity columns everywhere except constant-regressor blocks, which
        carry the sum-zero basis of their M coefficients.
        """
        m = self.basis_size
        blocks = [
            _sum_zero_basis(m) if j in self.constant_regressors else np.eye(m)
            for j in range(self.n_covariates)
        ]
        out = np.zeros((self.n_coef, self.n_active))
        row = col = 0
        for block in blocks:
            out[row : row + m, col : col + block.shape[1]] = block
            row += m
            col += block.shape[1]
        return out

    @property
    def n_active(self) -> int:
        """Identified coefficient count: M*p minus one level per constant block."""
        return self.n_coef - len(self.constant_regressors)

    @property
    def obs_counts(self) -> np.ndarray:
        return np.array([zi.shape[0] for zi in self.z])

    @property
    def total_obs(self) -> int:
        return int(self.obs_counts.sum())


def build_design(panel: Panel, config: SplineConfig) -> SieveDesign:
    """Construct the demeaned sieve design for `panel`.

    For every unit and observed period t, the raw regressor is
    x_it kron b(t/T) with T = panel.global_t; both the response and the raw
    regressors are then demeaned per unit over that unit's observed periods
    only. Demeaning happens after the Kronecker product: the basis varies
    over time, so demeaning x first would build a different (wrong) design.

    Regressors that are constant within every unit are flagged on the
    result; see :class:`SieveDesign` for the level convention applied to
    their coefficient blocks.
    """
    knots = build_knots(config)
    m = config.basis_size
    p = panel.n_covariates
    z_list, y_list = [], []
    for yi, xi, obs in zip(panel.y, panel.x, panel.observed):
        v = obs / panel.global_t
        basis = basis_matrix(knots, config.degree, v)  # (T_i, M)
        z = (xi[:, :, None] * basis[:, None, :]).reshape(len(obs), p * m)
        z_list.append(within(z))
        y_list.append(within(yi))
    constant = tuple(
        j for j in range(p) if all(np.ptp(xi[:, j]) == 0.0 for xi in panel.x)
    )
    return SieveDesign(
        z=tuple(z_list),
        y=tuple(y_list),
        observed=tuple(np.asarray(o) for o in panel.observed),
        unit_ids=panel.unit_ids,
        global_t=panel.global_t,
        n_covariates=p,
        config=config,
        knots=knots,
        constant_regressors=constant,
    )
