"""Truncated-power cubic spline bases with curvature penalties and ridge shrinkage.

A smooth f is represented as

    f(x) = theta_0 + theta_1 * x + sum_j theta_{j+1} * (x - k_j)_+^3

with fixed knots k_j placed at empirical quantiles of the observed covariate.
The roughness penalty integral(f''(x)^2 dx) over the observed range is a
quadratic form theta' S theta; adding a small ridge eps*I to S lets the whole
term shrink to exactly zero under heavy penalization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CollapsedKnotsWarning, DegenerateCovariate, InvalidEpsilon


@dataclass(frozen=True)
class KnotSet:
    """Strictly increasing interior knots plus the observed covariate range."""

    knots: tuple[float, ...]
    domain_lo: float
    domain_hi: float

    def __post_init__(self):
        ks = self.knots
        if any(ks[i] >= ks[i + 1] for i in range(len(ks) - 1)):
            raise ValueError("knots must be strictly increasing")
        if ks and (ks[0] < self.domain_lo or ks[-1] > self.domain_hi):
            raise ValueError("knots must lie within [domain_lo, domain_hi]")


@dataclass(frozen=True)
class SplineBasis:
    """Basis functions {1, x, (x-k_1)_+^3, ..., (x-k_q)_+^3}."""

    knot_set: KnotSet

    @property
    def dim(self) -> int:
        return len(self.knot_set.knots) + 2


@dataclass(frozen=True)
class PenaltyMatrix:
    """Symmetric curvature penalty, optionally shrunk by eps on the diagonal."""

    s: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        s.setflags(write=False)
        object.__setattr__(self, "s", s)


def place_knots(values, n_knots: int) -> KnotSet:
    """Place ``n_knots`` interior knots at the q/(n_knots+1) empirical quantiles.

    Quantiles use linear interpolation between order statistics. Duplicate
    quantiles (heavily tied covariates) are collapsed with a warning.

    Raises
    ------
    DegenerateCovariate
        If ``values`` has fewer than n_knots + 2 distinct points; the term
        should be modeled parametrically instead.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DegenerateCovariate("empty covariate")
    if n_knots < 0:
        raise ValueError("n_knots must be >= 0")
    n_distinct = np.unique(values).size
    if n_distinct < n_knots + 2:
        raise DegenerateCovariate(
            f"covariate has {n_distinct} distinct values; "
            f"need at least {n_knots + 2} for {n_knots} knots"
        )
    lo, hi = float(values.min()), float(values.max())
    if n_knots == 0:
        return KnotSet((), lo, hi)
    probs = np.arange(1, n_knots + 1) / (n_knots + 1)
    knots = np.quantile(values, probs, method="linear")
    uniq = np.unique(knots)
    if uniq.size < knots.size:
        warnings.warn(
            f"collapsed {knots.size - uniq.size} duplicate quantile knots",
            CollapsedKnotsWarning,
            stacklevel=2,
        )
    return KnotSet(tuple(float(k) for k in uniq), lo, hi)


def eval_basis(x: float, basis: SplineBasis) -> np.ndarray:
    """Evaluate all basis functions at a single point (extrapolation allowed)."""
    return basis_matrix(np.asarray([x], dtype=float), basis)[0]


def basis_matrix(x, basis: SplineBasis) -> np.ndarray:
    """Rows of basis-function values for a vector of points; shape (len(x), dim)."""
    x = np.asarray(x, dtype=float)
    knots = np.asarray(basis.knot_set.knots, dtype=float)
    out = np.empty((x.size, basis.dim))
    out[:, 0] = 1.0
    out[:, 1] = x
    if knots.size:
        out[:, 2:] = np.maximum(x[:, None] - knots[None, :], 0.0) ** 3
    return out


def penalty_matrix(basis: SplineBasis) -> PenaltyMatrix:
    """Curvature penalty integral(f'' g'') over [domain_lo, domain_hi], closed form.

    Only cubic basis functions carry curvature; entry (j+2, k+2) equals
    36 * integral (x-k_j)_+ (x-k_k)_+ dx = 12 H^3 + 18 c H^2 with
    H = hi - max(k_j, k_k) and c = |k_j - k_k|. The constant and linear
    rows/columns are zero.
    """
    knots = np.asarray(basis.knot_set.knots, dtype=float)
    dim = basis.dim
    s = np.zeros((dim, dim))
    if knots.size:
        hi = basis.knot_set.domain_hi
        upper = np.maximum(knots[:, None], knots[None, :])
        h = np.maximum(hi - upper, 0.0)
        c = np.abs(knots[:, None] - knots[None, :])
        s[2:, 2:] = 12.0 * h**3 + 18.0 * c * h**2
    return PenaltyMatrix(s=s, epsilon=0.0)


def shrink_penalty(pm: PenaltyMatrix, epsilon: float) -> PenaltyMatrix:
    """Return the ridge-shrunk penalty S + eps*I (positive definite)."""
    if epsilon <= 0:
        raise InvalidEpsilon(f"epsilon must be > 0, got {epsilon}")
    return PenaltyMatrix(s=pm.s + epsilon * np.eye(pm.s.shape[0]), epsilon=float(epsilon))


def default_epsilon(pm: PenaltyMatrix, scale: float = 1e-3) -> float:
    """Shrinkage sized to the penalty: scale times the mean nonzero eigenvalue of S.

    Falls back to ``scale`` itself when S is identically zero (no curvature
    directions to compare against, e.g. a knotless linear basis).
    """
    eig = np.linalg.eigvalsh(pm.s)
    nonzero = eig[eig > 1e-12 * max(eig.max(initial=0.0), 1.0)]
    if nonzero.size == 0:
        return scale
    return scale * float(nonzero.mean())


def centering_constant(basis: SplineBasis, theta, values) -> float:
    """Mean of the uncentered spline over ``values``.

    Subtracting this constant yields a centered smooth whose sum over the
    centering sample is zero.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.size != basis.dim:
        raise ValueError(f"theta has length {theta.size}, basis dim is {basis.dim}")
    return float(np.mean(basis_matrix(values, basis) @ theta))
