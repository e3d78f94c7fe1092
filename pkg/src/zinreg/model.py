"""Zero-inflated normal mixture: data containers, model specs, and likelihood.

The response is exactly zero with probability 1 - p and Normal(mu, sigma2)
with probability p. Both p (through a logit or probit link) and mu are
additive in parametric terms and centered cubic-spline smooths; a smooth may
be constrained to act proportionally in the two parts (h_j = delta_j * s_j).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, ndtr, ndtri

from . import splines
from .errors import (
    ConfigError,
    DimensionMismatch,
    NegativeSmoothingParameter,
    NonFiniteLikelihood,
    SchemaMismatch,
)

PROB_CLAMP = 1e-10

# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Factor:
    """Integer-coded categorical column; levels[0] is the reference."""

    codes: np.ndarray
    levels: tuple[str, ...]

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        if codes.size and (codes.min() < 0 or codes.max() >= len(self.levels)):
            raise ValueError("factor codes outside level range")

    @classmethod
    def from_strings(cls, values, levels=None, reference=None):
        values = [str(v) for v in values]
        if levels is None:
            levels = sorted(set(values))
            if reference is not None:
                if reference not in levels:
                    raise ValueError(f"reference level {reference!r} not observed")
                levels.remove(reference)
                levels.insert(0, reference)
        levels = tuple(levels)
        index = {lev: i for i, lev in enumerate(levels)}
        try:
            codes = np.asarray([index[v] for v in values], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"value {exc.args[0]!r} not in factor levels {levels}") from None
        return cls(codes=codes, levels=levels)


@dataclass(frozen=True)
class Dataset:
    """Response plus factor and continuous covariate columns.

    The zero indicator E_i = 1{y_i != 0} is derived on construction; the
    zero-inflation atom must be coded exactly 0.0 (e.g. log1p keeps it).
    ``y`` may be None for covariate-only data used in prediction.
    """

    y: np.ndarray | None
    factors: dict[str, Factor]
    continuous: dict[str, np.ndarray]
    zero_indicator: np.ndarray = field(init=False)

    def __post_init__(self):
        lengths = set()
        if self.y is not None:
            y = np.asarray(self.y, dtype=float)
            if not np.all(np.isfinite(y)):
                raise ValueError("response contains missing or non-finite values")
            y.setflags(write=False)
            object.__setattr__(self, "y", y)
            lengths.add(y.size)
        cont = {}
        for name, col in self.continuous.items():
            col = np.asarray(col, dtype=float)
            if not np.all(np.isfinite(col)):
                raise ValueError(f"continuous column {name!r} contains missing values")
            col.setflags(write=False)
            cont[name] = col
            lengths.add(col.size)
        object.__setattr__(self, "continuous", cont)
        for name, fac in self.factors.items():
            lengths.add(fac.codes.size)
        if len(lengths) > 1:
            raise ValueError(f"columns have unequal lengths: {sorted(lengths)}")
        if self.y is not None:
            e = (self.y != 0.0).astype(float)
            e.setflags(write=False)
            object.__setattr__(self, "zero_indicator", e)
        else:
            object.__setattr__(self, "zero_indicator", None)

    @property
    def n(self) -> int:
        if self.y is not None:
            return self.y.size
        for col in self.continuous.values():
            return col.size
        for fac in self.factors.values():
            return fac.codes.size
        return 0

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            y=None if self.y is None else self.y[idx],
            factors={k: Factor(v.codes[idx], v.levels) for k, v in self.factors.items()},
            continuous={k: v[idx] for k, v in self.continuous.items()},
        )


# ---------------------------------------------------------------------------
# links


class LogitLink:
    kind = "logit"

    @staticmethod
    def inv(eta):
        return expit(eta)

    @staticmethod
    def dinv(eta):
        m = expit(eta)
        return m * (1.0 - m)

    @staticmethod
    def d2inv(eta):
        m = expit(eta)
        return m * (1.0 - m) * (1.0 - 2.0 * m)

    @staticmethod
    def link(p):
        return np.log(p / (1.0 - p))


class ProbitLink:
    kind = "probit"

    @staticmethod
    def inv(eta):
        return ndtr(eta)

    @staticmethod
    def dinv(eta):
        return np.exp(-0.5 * eta**2) / math.sqrt(2.0 * math.pi)

    @staticmethod
    def d2inv(eta):
        return -eta * np.exp(-0.5 * eta**2) / math.sqrt(2.0 * math.pi)

    @staticmethod
    def link(p):
        return ndtri(p)


_LINKS = {"logit": LogitLink, "probit": ProbitLink}


def get_link(kind: str):
    try:
        return _LINKS[kind]
    except KeyError:
        raise ConfigError(f"unknown link {kind!r}; choose from {sorted(_LINKS)}") from None


def bernoulli_log_likelihood(e, eta, link, clamp=PROB_CLAMP) -> float:
    """Bernoulli log-likelihood of the zero indicator on the linear-predictor scale."""
    m = np.clip(link.inv(eta), clamp, 1.0 - clamp)
    return float(e @ np.log(m) + (1.0 - e) @ np.log(1.0 - m))


def gaussian_log_likelihood(y, mu, sigma2) -> float:
    """Gaussian log-likelihood including the normalizing constant."""
    r = np.asarray(y) - np.asarray(mu)
    n = r.size
    return float(-0.5 * n * math.log(2.0 * math.pi * sigma2) - (r @ r) / (2.0 * sigma2))


def bernoulli_eta_derivatives(e, eta, link, clamp=PROB_CLAMP):
    """First and (negated) second derivative of the Bernoulli log-likelihood in eta.

    Returns (a, w) with a_i = d l_i / d eta_i and w_i = -d^2 l_i / d eta_i^2.
    Probabilities are clamped away from 0 and 1 for stability.
    """
    m = np.clip(link.inv(eta), clamp, 1.0 - clamp)
    dm = link.dinv(eta)
    d2m = link.d2inv(eta)
    u = e / m - (1.0 - e) / (1.0 - m)
    a = u * dm
    w = (e / m**2 + (1.0 - e) / (1.0 - m) ** 2) * dm**2 - u * d2m
    return a, w


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class SmoothSpec:
    name: str
    n_knots: int = 9

    def __post_init__(self):
        if self.n_knots < 0:
            raise ConfigError(f"smooth {self.name!r}: knot count must be >= 0")


@dataclass(frozen=True)
class PartSpec:
    parametric: tuple[str, ...] = ()
    smooths: tuple[SmoothSpec, ...] = ()

    def smooth_names(self):
        return tuple(s.name for s in self.smooths)


@dataclass(frozen=True)
class ConstraintSpec:
    constrained_terms: frozenset[str] = frozenset()
    initial_deltas: dict[str, float] | None = None

    def __bool__(self):
        return bool(self.constrained_terms)


@dataclass(frozen=True)
class ModelSpec:
    binary_part: PartSpec
    mean_part: PartSpec
    link: str = "logit"
    epsilon: float | None = None
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec)

    def __post_init__(self):
        get_link(self.link)
        if self.epsilon is not None and self.epsilon <= 0:
            raise ConfigError("epsilon must be positive (or None for the automatic rule)")
        binary = dict((s.name, s.n_knots) for s in self.binary_part.smooths)
        mean = dict((s.name, s.n_knots) for s in self.mean_part.smooths)
        for term in self.constraint.constrained_terms:
            if term not in binary or term not in mean:
                raise ConfigError(f"constrained term {term!r} must be a smooth in both parts")
            if binary[term] != mean[term]:
                raise ConfigError(f"constrained term {term!r} needs equal knot counts in both parts")

    def with_constraint(self, terms) -> "ModelSpec":
        return replace(self, constraint=ConstraintSpec(frozenset(terms)))


# ---------------------------------------------------------------------------
# model frame: data-derived bases, penalties, and design assembly


@dataclass(frozen=True)
class SmoothRep:
    """One smooth term's fitted representation, shared by both parts.

    The covariate is affinely mapped onto [0, 1] before the basis expansion
    (keeps the truncated-power columns well conditioned); the curvature
    penalty is rescaled by the cube of the range so it still equals the
    second-derivative integral in raw covariate units.
    """

    name: str
    basis: splines.SplineBasis
    x_lo: float
    x_hi: float
    col_means: np.ndarray
    penalty: splines.PenaltyMatrix  # shrunk: S + eps*I

    @property
    def dim(self) -> int:
        return self.basis.dim

    def scale(self, x):
        width = self.x_hi - self.x_lo
        return (np.asarray(x, dtype=float) - self.x_lo) / width

    def design(self, x) -> np.ndarray:
        """Centered basis rows; the fitted contribution is design(x) @ theta."""
        return splines.basis_matrix(self.scale(x), self.basis) - self.col_means

    def value(self, x, theta) -> np.ndarray:
        return self.design(x) @ np.asarray(theta, dtype=float)

    def centering(self, theta) -> float:
        return float(self.col_means @ np.asarray(theta, dtype=float))


def _build_smooth_rep(name, n_knots, values, epsilon) -> SmoothRep:
    lo, hi = float(np.min(values)), float(np.max(values))
    width = hi - lo
    u = (np.asarray(values, dtype=float) - lo) / width
    knot_set = splines.place_knots(u, n_knots)
    basis = splines.SplineBasis(knot_set)
    pm = splines.penalty_matrix(basis)
    pm = splines.PenaltyMatrix(s=pm.s / width**3, epsilon=0.0)
    eps = splines.default_epsilon(pm) if epsilon is None else float(epsilon)
    pm = splines.shrink_penalty(pm, eps)
    col_means = splines.basis_matrix(u, basis).mean(axis=0)
    return SmoothRep(name=name, basis=basis, x_lo=lo, x_hi=hi, col_means=col_means, penalty=pm)


@dataclass(frozen=True)
class PartFrame:
    parametric_labels: tuple[str, ...]
    parametric_sources: tuple[tuple[str, str | None], ...]  # (column, level or None)
    smooths: tuple[SmoothRep, ...]

    @property
    def n_columns(self) -> int:
        return 1 + len(self.parametric_labels) + sum(s.dim for s in self.smooths)

    def smooth_slices(self) -> dict[str, slice]:
        out = {}
        start = 1 + len(self.parametric_labels)
        for rep in self.smooths:
            out[rep.name] = slice(start, start + rep.dim)
            start += rep.dim
        return out


@dataclass(frozen=True)
class ModelFrame:
    """ModelSpec bound to training data: factor schema, bases, penalties."""

    spec: ModelSpec
    binary: PartFrame
    mean: PartFrame
    factor_levels: dict[str, tuple[str, ...]]

    @property
    def link(self):
        return get_link(self.spec.link)

    def part(self, which: str) -> PartFrame:
        if which == "binary":
            return self.binary
        if which == "mean":
            return self.mean
        raise KeyError(which)

    def check_schema(self, data: Dataset):
        for name, levels in self.factor_levels.items():
            if name not in data.factors:
                raise SchemaMismatch(f"missing factor column {name!r}")
            if data.factors[name].levels != levels:
                # allow subsets coded against identical level tuples only
                raise SchemaMismatch(
                    f"factor {name!r} levels {data.factors[name].levels} != fitted {levels}"
                )
        used = set()
        for pf in (self.binary, self.mean):
            used.update(col for col, lev in pf.parametric_sources if lev is None)
            used.update(rep.name for rep in pf.smooths)
        for name in used:
            if name not in data.continuous and name not in data.factors:
                raise SchemaMismatch(f"missing covariate column {name!r}")

    def part_design(self, which: str, data: Dataset) -> np.ndarray:
        """Assemble [1 | parametric | centered smooth blocks] for one part."""
        pf = self.part(which)
        n = data.n
        cols = [np.ones((n, 1))]
        for column, level in pf.parametric_sources:
            if level is None:
                cols.append(data.continuous[column][:, None])
            else:
                fac = data.factors[column]
                code = fac.levels.index(level)
                cols.append((fac.codes == code).astype(float)[:, None])
        for rep in pf.smooths:
            cols.append(rep.design(data.continuous[rep.name]))
        return np.hstack(cols)


def _parametric_columns(names, data: Dataset):
    labels, sources = [], []
    for name in names:
        if name in data.factors:
            levels = data.factors[name].levels
            for level in levels[1:]:
                labels.append(f"{name}={level}")
                sources.append((name, level))
        elif name in data.continuous:
            labels.append(name)
            sources.append((name, None))
        else:
            raise ConfigError(f"parametric term {name!r} is not a column of the data")
    return tuple(labels), tuple(sources)


def build_frame(spec: ModelSpec, data: Dataset) -> ModelFrame:
    """Bind a spec to training data, constructing shared smooth representations."""
    reps: dict[tuple[str, int], SmoothRep] = {}

    def part_frame(part: PartSpec) -> PartFrame:
        labels, sources = _parametric_columns(part.parametric, data)
        smooth_reps = []
        for sm in part.smooths:
            if sm.name not in data.continuous:
                raise ConfigError(f"smooth term {sm.name!r} is not a continuous column")
            key = (sm.name, sm.n_knots)
            if key not in reps:
                reps[key] = _build_smooth_rep(
                    sm.name, sm.n_knots, data.continuous[sm.name], spec.epsilon
                )
            smooth_reps.append(reps[key])
        return PartFrame(parametric_labels=labels, parametric_sources=sources,
                         smooths=tuple(smooth_reps))

    return ModelFrame(
        spec=spec,
        binary=part_frame(spec.binary_part),
        mean=part_frame(spec.mean_part),
        factor_levels={k: v.levels for k, v in data.factors.items()},
    )


# ---------------------------------------------------------------------------
# parameters and likelihood


@dataclass(frozen=True)
class ZinParams:
    """Coefficients for both parts.

    Constrained terms store a single coefficient block in ``smooths_s`` plus
    the proportionality scalar in ``deltas`` (no independent binary block);
    an unidentified delta is stored as NaN.
    """

    beta0: float
    beta: dict[str, float]
    gamma0: float
    gamma: dict[str, float]
    smooths_h: dict[str, np.ndarray]
    smooths_s: dict[str, np.ndarray]
    deltas: dict[str, float]
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")


def _smooth_contribution(frame: ModelFrame, params: ZinParams, which: str, data: Dataset):
    pf = frame.part(which)
    constrained = frame.spec.constraint.constrained_terms
    total = np.zeros(data.n)
    for rep in pf.smooths:
        x = data.continuous[rep.name]
        if which == "binary":
            if rep.name in constrained:
                theta = params.smooths_s[rep.name]
                delta = params.deltas[rep.name]
                contrib = delta * rep.value(x, theta) if np.isfinite(delta) else 0.0
            else:
                theta = params.smooths_h[rep.name]
                contrib = rep.value(x, theta)
        else:
            theta = params.smooths_s[rep.name]
            contrib = rep.value(x, theta)
        if np.asarray(theta).size != rep.dim:
            raise DimensionMismatch(
                f"{which} smooth {rep.name!r}: theta length {np.asarray(theta).size} != {rep.dim}"
            )
        total += contrib
    return total


def _parametric_contribution(pf: PartFrame, coefs: dict[str, float], data: Dataset):
    total = np.zeros(data.n)
    for label, (column, level) in zip(pf.parametric_labels, pf.parametric_sources):
        if label not in coefs:
            raise DimensionMismatch(f"missing coefficient for parametric column {label!r}")
        if level is None:
            col = data.continuous[column]
        else:
            fac = data.factors[column]
            col = (fac.codes == fac.levels.index(level)).astype(float)
        total += coefs[label] * col
    return total


def linear_predictors(params: ZinParams, frame: ModelFrame, data: Dataset):
    """Both parts' linear predictors (eta_p, mu); smooths enter centered."""
    eta_p = params.beta0 + _parametric_contribution(frame.binary, params.beta, data)
    eta_p += _smooth_contribution(frame, params, "binary", data)
    mu = params.gamma0 + _parametric_contribution(frame.mean, params.gamma, data)
    mu += _smooth_contribution(frame, params, "mean", data)
    return eta_p, mu


def log_likelihood(params: ZinParams, frame: ModelFrame, data: Dataset,
                   prob_clamp: float = PROB_CLAMP) -> float:
    """Total mixture log-likelihood, including the Gaussian normalizing constant.

    Nonzero observations contribute log p - log(2*pi*sigma2)/2 - (y-mu)^2/(2*sigma2);
    zero observations contribute log(1 - p). Probabilities are clamped to
    [prob_clamp, 1 - prob_clamp] before taking logs.
    """
    eta_p, mu = linear_predictors(params, frame, data)
    p = np.clip(frame.link.inv(eta_p), prob_clamp, 1.0 - prob_clamp)
    e = data.zero_indicator
    nz = e == 1.0
    ll = float(np.sum(np.log(1.0 - p[~nz])))
    r = data.y[nz] - mu[nz]
    s2 = params.sigma2
    ll += float(
        np.sum(np.log(p[nz]))
        - 0.5 * nz.sum() * math.log(2.0 * math.pi * s2)
        - float(r @ r) / (2.0 * s2)
    )
    if not np.isfinite(ll):
        raise NonFiniteLikelihood(f"log-likelihood is {ll}")
    return ll


def smooth_penalty(params: ZinParams, frame: ModelFrame, lambdas, phis) -> float:
    """Sum of squared-smoothing-parameter-weighted quadratic penalties.

    Binary-part smooths carry lambda^2 * J(h); a constrained term's induced
    h = delta * s is penalized as lambda^2 * delta^2 * J(s). Mean-part smooths
    carry phi^2 * J(s). J uses the shrunk penalty matrix S + eps*I.
    """
    constrained = frame.spec.constraint.constrained_terms
    total = 0.0
    for rep in frame.binary.smooths:
        lam = _get_param(lambdas, rep.name, "lambda")
        if rep.name in constrained:
            delta = params.deltas[rep.name]
            theta = params.smooths_s[rep.name]
            d2 = delta**2 if np.isfinite(delta) else 0.0
            total += lam**2 * d2 * float(theta @ rep.penalty.s @ theta)
        else:
            theta = params.smooths_h[rep.name]
            total += lam**2 * float(theta @ rep.penalty.s @ theta)
    for rep in frame.mean.smooths:
        phi = _get_param(phis, rep.name, "phi")
        theta = params.smooths_s[rep.name]
        total += phi**2 * float(theta @ rep.penalty.s @ theta)
    return total


def _get_param(mapping, name, label):
    try:
        value = mapping[name]
    except KeyError:
        raise DimensionMismatch(f"missing {label} for smooth {name!r}") from None
    if value < 0:
        raise NegativeSmoothingParameter(f"{label}[{name!r}] = {value}")
    return value


def penalized_log_likelihood(params: ZinParams, frame: ModelFrame, data: Dataset,
                             lambdas, phis, prob_clamp: float = PROB_CLAMP) -> float:
    return log_likelihood(params, frame, data, prob_clamp) - smooth_penalty(
        params, frame, lambdas, phis
    )


def predict(params: ZinParams, frame: ModelFrame, covariates: Dataset):
    """Per-row nonzero probability, conditional mean, and overall mean p*mu."""
    frame.check_schema(covariates)
    eta_p, mu = linear_predictors(params, frame, covariates)
    p = frame.link.inv(eta_p)
    return p, mu, p * mu
