"""Partition extraction, small-group repair, and the post-Lasso refit.

The fused estimate pi_hat places homogeneous units at (numerically) equal
coefficient vectors. Grouping thresholds the pairwise distances and takes
connected components, so transitivity holds by construction: if units (i, j)
and (j, l) fall below the tolerance, all three share a group even when
(i, l) does not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .panel import SieveDesign
from .solver import AdmmState, SingularGroupError, pair_index
from .splines import basis_matrix


class UnionFind:
    """Disjoint sets over 0..n-1 with path compression and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:  # compress
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return
        if self.size[ri] < self.size[rj]:
            ri, rj = rj, ri
        self.parent[rj] = ri
        self.size[ri] += self.size[rj]


@dataclass(frozen=True)
class Partition:
    """Unit-to-group assignment with labels 0..n_groups-1.

    Labels are canonical: group 0 is the group of the lowest-indexed unit,
    group 1 the next new group encountered in unit order, and so on.
    """

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "labels", labels)
        uniq = np.unique(labels)
        if labels.size == 0 or not np.array_equal(uniq, np.arange(uniq.size)):
            raise ValueError("labels must cover 0..K-1 with every group nonempty")

    @property
    def n_units(self) -> int:
        return int(self.labels.size)

    @property
    def n_groups(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_groups)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def canonical_labels(raw: np.ndarray) -> np.ndarray:
    """Relabel arbitrary group ids to 0..K-1 in order of first appearance."""
    raw = np.asarray(raw)
    mapping: dict = {}
    out = np.empty(raw.size, dtype=int)
    for idx, label in enumerate(raw):
        key = label.item() if hasattr(label, "item") else label
        if key not in mapping:
            mapping[key] = len(mapping)
        out[idx] = mapping[key]
    return out


def extract_partition(pi_hat: np.ndarray, tol_group: float) -> Partition:
    """Connected components of the pairwise-distance graph below `tol_group`."""
    n = pi_hat.shape[0]
    uf = UnionFind(n)
    idx_i, idx_j = pair_index(n)
    dist = np.linalg.norm(pi_hat[idx_i] - pi_hat[idx_j], axis=1)
    for i, j in zip(idx_i[dist < tol_group], idx_j[dist < tol_group]):
        uf.union(int(i), int(j))
    roots = np.array([uf.find(i) for i in range(n)])
    return Partition(labels=canonical_labels(roots))


def group_gram_solve(design: SieveDesign, members: np.ndarray, label) -> np.ndarray:
    """Pooled least squares over the member units' observed periods.

    The solve runs in the design's identified coordinates and is mapped back
    to the full length-q layout, so coefficients of level-free blocks sum to
    zero (the minimum-norm representative).
    """
    red = design.reduction
    q_a = design.n_active
    gram = np.zeros((q_a, q_a))
    rhs = np.zeros(q_a)
    for i in members:
        za = design.z[i] @ red
        gram += za.T @ za
        rhs += za.T @ design.y[i]
    try:
        coef_a = scipy.linalg.solve(gram, rhs, assume_a="pos")
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularGroupError(
            f"group {label} has a singular pooled Gram matrix"
        ) from exc
    if not np.all(np.isfinite(coef_a)):
        raise SingularGroupError(f"group {label} has a singular pooled Gram matrix")
    return red @ coef_a


def enforce_min_share(
    partition: Partition, design: SieveDesign, min_group_share: float
) -> tuple[Partition, bool]:
    """Reassign units of undersized groups to the best-fitting survivor.

    Groups below ``min_group_share`` of N are dissolved one unit at a time:
    undersized groups are processed in increasing size order (ties by lower
    label), their units in ascending unit order, and each unit joins the
    surviving group whose already-fitted pooled coefficients give the lowest
    residual sum of squares on that unit. Returns the repaired partition and
    a warning flag that is True when no group met the floor (in which case
    the partition is returned unchanged).
    """
    n = partition.n_units
    sizes = partition.sizes
    survivors = np.flatnonzero(sizes / n >= min_group_share)
    if survivors.size == 0:
        return partition, True
    if survivors.size == partition.n_groups:
        return partition, False

    coefs = {
        int(k): group_gram_solve(design, partition.members(k), k) for k in survivors
    }
    labels = partition.labels.copy()
    undersized = [k for k in range(partition.n_groups) if k not in coefs]
    undersized.sort(key=lambda k: (sizes[k], k))
    for k in undersized:
        for i in partition.members(k):
            rss = {
                s: float(np.sum((design.y[i] - design.z[i] @ coefs[s]) ** 2))
                for s in coefs
            }
            labels[i] = min(rss, key=lambda s: (rss[s], s))
    return Partition(labels=canonical_labels(labels)), False


@dataclass(frozen=True)
class GroupedFit:
    """Joint result of one penalized fit after grouping and refitting.

    ``post_coefs`` and ``pse_coefs`` each hold one (M, p) control-point
    matrix per group; columns follow the regressor order of the design.
    ``sigma2`` is the post-Lasso mean squared error over all observations.
    """

    partition: Partition
    pse_coefs: np.ndarray
    post_coefs: np.ndarray
    residuals: tuple
    sigma2: float
    state: AdmmState | None = None
    min_share_warning: bool = False
    pi_hat: np.ndarray | None = field(default=None, repr=False)


def post_lasso(design: SieveDesign, partition: Partition):
    """Group-pooled OLS refit.

    Returns (coefs, residuals, sigma2): coefs has shape (K, M, p) with the
    control points of group k in coefs[k]; residuals are per-unit arrays of
    the demeaned response minus the fitted values from the unit's group;
    sigma2 is the total squared residual divided by the observation count.
    """
    m = design.basis_size
    p = design.n_covariates
    coefs = np.empty((partition.n_groups, m, p))
    flat = np.empty((partition.n_groups, design.n_coef))
    for k in range(partition.n_groups):
        xi = group_gram_solve(design, partition.members(k), k)
        flat[k] = xi
        coefs[k] = xi.reshape(p, m).T  # vec by regressor-major blocks
    residuals = tuple(
        design.y[i] - design.z[i] @ flat[partition.labels[i]]
        for i in range(design.n_units)
    )
    sse = sum(float(r @ r) for r in residuals)
    sigma2 = sse / design.total_obs
    return coefs, residuals, sigma2


def pse_group_coefs(pi_hat: np.ndarray, partition: Partition, design: SieveDesign):
    """Group control points of the penalized estimator itself.

    Members of an estimated group carry numerically equal pi_hat vectors up
    to the grouping tolerance; the group matrix is their member mean.
    """
    m, p = design.basis_size, design.n_covariates
    out = np.empty((partition.n_groups, m, p))
    for k in range(partition.n_groups):
        mean = pi_hat[partition.members(k)].mean(axis=0)
        out[k] = mean.reshape(p, m).T
    return out


def grouped_fit(
    design: SieveDesign,
    pi_hat: np.ndarray,
    state: AdmmState | None,
    tol_group: float,
    min_group_share: float,
) -> GroupedFit:
    """extract_partition -> enforce_min_share -> post_lasso, bundled."""
    partition = extract_partition(pi_hat, tol_group)
    partition, warning = enforce_min_share(partition, design, min_group_share)
    coefs, residuals, sigma2 = post_lasso(design, partition)
    return GroupedFit(
        partition=partition,
        pse_coefs=pse_group_coefs(pi_hat, partition, design),
        post_coefs=coefs,
        residuals=residuals,
        sigma2=sigma2,
        state=state,
        min_share_warning=warning,
        pi_hat=pi_hat,
    )


def coef_path(
    coefs: np.ndarray, design: SieveDesign, k: int, grid: np.ndarray
) -> np.ndarray:
    """Evaluate group k's coefficient curves on `grid`; shape (len(grid), p).

    `coefs` is a (K, M, p) stack as stored on GroupedFit (post_coefs or
    pse_coefs).
    """
    if not 0 <= k < coefs.shape[0]:
        raise IndexError(f"group index {k} out of range for {coefs.shape[0]} groups")
    basis = basis_matrix(design.knots, design.config.degree, np.asarray(grid))
    return basis @ coefs[k]
