"""Core domain types: grouped designs, likelihood families, priors and states."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .errors import (
    BadResponseDomain,
    CoverageGap,
    NonContiguousGroups,
    OverlappingGroups,
)

_INT_TOL = 1e-9


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    BINOMIAL = "binomial"
    POISSON = "poisson"


class VariationalKind(str, enum.Enum):
    """Slab covariance structure: diagonal (GSVB-D) or full within group (GSVB-B)."""

    DIAGONAL = "diagonal"
    BLOCK = "block"


@dataclass(frozen=True)
class GsvbPrior:
    """Group spike-and-slab prior.

    ``lam`` is the slab rate, ``a0, b0`` the Beta prior on the inclusion
    probabilities and ``a, b`` the inverse-Gamma prior on the noise variance
    (used by the Gaussian family only).
    """

    lam: float = 1.0
    a0: float = 1.0
    b0: float = 1.0
    a: float = 1e-3
    b: float = 1e-3

    def __post_init__(self):
        for name in ("lam", "a0", "b0", "a", "b"):
            if not getattr(self, name) > 0:
                raise ValueError(f"prior parameter {name} must be positive")

    @classmethod
    def default(cls, n_groups: int) -> "GsvbPrior":
        return cls(lam=1.0, a0=1.0, b0=float(n_groups), a=1e-3, b=1e-3)

    @property
    def w_bar(self) -> float:
        return self.a0 / (self.a0 + self.b0)


@dataclass(frozen=True, eq=False)
class GroupedDesign:
    """Design matrix, response and a contiguous partition of the columns.

    ``groups`` holds ``(start, size)`` pairs with zero-based starts.
    """

    X: np.ndarray
    y: np.ndarray
    groups: tuple[tuple[int, int], ...]

    @classmethod
    def from_sizes(cls, X, y, sizes: Sequence[int]) -> "GroupedDesign":
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
        groups = tuple((int(s), int(m)) for s, m in zip(starts, sizes))
        return cls(np.asarray(X, dtype=float), np.asarray(y, dtype=float), groups)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([m for _, m in self.groups], dtype=int)

    @cached_property
    def slices(self) -> list[slice]:
        return [slice(s, s + m) for s, m in self.groups]

    @cached_property
    def group_index(self) -> np.ndarray:
        """Group id of every column."""
        return np.repeat(np.arange(self.n_groups), self.sizes)

    @cached_property
    def gram_blocks(self) -> list[np.ndarray]:
        return [self.X[:, sl].T @ self.X[:, sl] for sl in self.slices]

    @cached_property
    def gram(self) -> np.ndarray:
        return self.X.T @ self.X

    @cached_property
    def yty(self) -> float:
        return float(self.y @ self.y)

    @cached_property
    def log_y_factorial(self) -> float:
        return float(gammaln(self.y + 1.0).sum())


def canonicalize_groups(labels: Sequence) -> tuple[np.ndarray, list[int]]:
    """Map arbitrary per-column group labels to the contiguous layout.

    Returns a column permutation (apply as ``X[:, perm]``) and the group sizes
    in order of first appearance of each label.
    """
    labels = list(labels)
    order: list = []
    for lab in labels:
        if lab not in order:
            order.append(lab)
    rank = {lab: i for i, lab in enumerate(order)}
    perm = np.array(sorted(range(len(labels)), key=lambda j: (rank[labels[j]], j)))
    sizes = [labels.count(lab) for lab in order]
    return perm, sizes


def check_partition(index_sets: Sequence[Sequence[int]], p: int) -> tuple[tuple[int, int], ...]:
    """Validate one-based index sets as an ordered contiguous cover of 1..p."""
    seen: dict[int, int] = {}
    for k, g in enumerate(index_sets):
        if len(g) == 0:
            raise CoverageGap(f"group {k + 1} is empty", index=k + 1)
        for j in g:
            if j in seen:
                raise OverlappingGroups(
                    f"index {j} appears in groups {seen[j] + 1} and {k + 1}", index=j
                )
            seen[j] = k
    missing = sorted(set(range(1, p + 1)) - set(seen))
    extra = sorted(set(seen) - set(range(1, p + 1)))
    if missing or extra:
        bad = (missing or extra)[0]
        raise CoverageGap(f"index {bad} is not covered exactly once by 1..{p}", index=bad)
    expected = 1
    out = []
    for k, g in enumerate(index_sets):
        if list(g) != list(range(expected, expected + len(g))):
            raise NonContiguousGroups(
                f"group {k + 1} is not the contiguous range starting at {expected}",
                index=k + 1,
            )
        out.append((expected - 1, len(g)))
        expected += len(g)
    return tuple(out)


def validate_grouped_design(design: GroupedDesign, family: Family) -> GroupedDesign:
    """Return ``design`` unchanged if it satisfies every structural invariant."""
    family = Family(family)
    X, y = design.X, design.y
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"shape mismatch: X is {X.shape}, y is {y.shape}")
    if design.n < 1 or design.n_groups < 1:
        raise ValueError("design needs at least one row and one group")
    sets = [range(s + 1, s + m + 1) for s, m in design.groups]
    check_partition(sets, design.p)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("design contains non-finite values")
    if family is Family.BINOMIAL:
        bad = np.flatnonzero(
            (np.abs(y) > _INT_TOL) & (np.abs(y - 1.0) > _INT_TOL)
        )
        if bad.size:
            raise BadResponseDomain(
                f"row {bad[0] + 1}: binomial response {y[bad[0]]} not in {{0, 1}}",
                index=int(bad[0]) + 1,
            )
    elif family is Family.POISSON:
        bad = np.flatnonzero((y < -_INT_TOL) | (np.abs(y - np.round(y)) > _INT_TOL))
        if bad.size:
            raise BadResponseDomain(
                f"row {bad[0] + 1}: poisson response {y[bad[0]]} is not a count",
                index=int(bad[0]) + 1,
            )
    return design


def log_slab_constant(m: int) -> float:
    """log C_m for the m-dimensional double exponential slab."""
    return -(m * np.log(2.0) + 0.5 * (m - 1) * np.log(np.pi) + gammaln(0.5 * (m + 1)))


def slab_log_density(beta_g, lam: float) -> float:
    """Log density of the multivariate double exponential slab at ``beta_g``."""
    beta_g = np.atleast_1d(np.asarray(beta_g, dtype=float))
    m = beta_g.shape[-1]
    return log_slab_constant(m) + m * np.log(lam) - lam * np.linalg.norm(beta_g, axis=-1)


@dataclass
class VariationalState:
    """Parameters of the variational posterior.

    ``sigma_blocks[k]`` is the slab covariance of group k. ``tau_a, tau_b``
    parameterize the inverse-Gamma factor for the noise variance (Gaussian
    family) and ``jaakkola_t`` holds the logistic bound tangent points
    (Binomial family).
    """

    mu: np.ndarray
    sigma_blocks: list[np.ndarray]
    gamma: np.ndarray
    tau_a: float | None = None
    tau_b: float | None = None
    jaakkola_t: np.ndarray | None = field(default=None)

    def copy(self) -> "VariationalState":
        return replace(
            self,
            mu=self.mu.copy(),
            sigma_blocks=[s.copy() for s in self.sigma_blocks],
            gamma=self.gamma.copy(),
            jaakkola_t=None if self.jaakkola_t is None else self.jaakkola_t.copy(),
        )

    def sigma_diag(self) -> np.ndarray:
        return np.concatenate([np.diag(s) for s in self.sigma_blocks])

    def posterior_mean(self, design: GroupedDesign) -> np.ndarray:
        return self.gamma[design.group_index] * self.mu

    def flat(self) -> np.ndarray:
        """All parameters as one vector (used for the convergence check)."""
        parts = [self.mu, self.gamma] + [s.ravel() for s in self.sigma_blocks]
        if self.tau_a is not None:
            parts.append(np.array([self.tau_a, self.tau_b]))
        if self.jaakkola_t is not None:
            parts.append(self.jaakkola_t)
        return np.concatenate(parts)

    def check(self) -> None:
        if np.any(self.gamma < 0) or np.any(self.gamma > 1):
            raise ValueError("inclusion probabilities must lie in [0, 1]")
        for k, s in enumerate(self.sigma_blocks):
            if not np.allclose(s, s.T):
                raise ValueError(f"sigma block {k} is not symmetric")
            np.linalg.cholesky(s)
