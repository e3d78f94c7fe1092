"""Monte Carlo cross-validation over candidate constraint specifications.

Each replication draws one train/validation split (shared across all
candidates, stratified on the zero indicator by default), fits every
candidate on the training set, and scores four criteria on the validation
set: validation log-likelihood, AUC of the zero indicator, MSE over nonzero
responses, and the bias-corrected MSE using E(Y) = p * mu. The candidate with
the largest mean validation log-likelihood is selected; the other criteria
are reported for diagnostics.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import fitting
from . import model as zm
from .errors import (
    AllReplicationsFailed,
    NoNonzeroValidation,
    SingleClass,
    ZinError,
)

CRITERIA = ("loglik", "auc", "mse", "mse_c")


@dataclass(frozen=True)
class MccvConfig:
    b: int = 100
    nu: float = 0.5
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.b < 1:
            raise ValueError("b must be >= 1")
        if not 0.0 < self.nu < 1.0:
            raise ValueError("nu must be in (0, 1)")


@dataclass(frozen=True)
class CandidateResult:
    name: str
    constrained_terms: tuple[str, ...]
    # replication-level values; NaN where the replication was dropped
    loglik: np.ndarray
    auc: np.ndarray
    mse: np.ndarray
    mse_c: np.ndarray

    def mean(self, criterion: str) -> float:
        vals = getattr(self, criterion)
        ok = np.isfinite(vals)
        return float(vals[ok].mean()) if ok.any() else float("nan")

    def std_error(self, criterion: str) -> float:
        vals = getattr(self, criterion)
        ok = np.isfinite(vals)
        if ok.sum() < 2:
            return float("nan")
        return float(vals[ok].std(ddof=1) / np.sqrt(ok.sum()))


@dataclass(frozen=True)
class CvReport:
    candidates: tuple[CandidateResult, ...]
    selected: str
    failed_replications: int
    config: MccvConfig

    def candidate(self, name: str) -> CandidateResult:
        for c in self.candidates:
            if c.name == name:
                return c
        raise KeyError(name)


# ---------------------------------------------------------------------------
# evaluation criteria


def cv_loglik(fitted: fitting.FittedZinModel, validation: zm.Dataset) -> float:
    """Validation-set mixture log-likelihood under the trained parameters."""
    return zm.log_likelihood(fitted.params, fitted.frame, validation)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
    correctly, ties counted one half. Exact, via midranks."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise SingleClass("AUC needs both a positive and a negative example")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def mse_nonzero(fitted: fitting.FittedZinModel, validation: zm.Dataset) -> float:
    """Mean squared error of mu-hat over nonzero validation responses."""
    nz = validation.zero_indicator == 1.0
    if not nz.any():
        raise NoNonzeroValidation("validation set has no nonzero responses")
    _, mu = zm.linear_predictors(fitted.params, fitted.frame, validation)
    r = validation.y[nz] - mu[nz]
    return float(r @ r / nz.sum())


def mse_corrected(fitted: fitting.FittedZinModel, validation: zm.Dataset) -> float:
    """Mean squared error of p-hat * mu-hat against all validation responses."""
    eta_p, mu = zm.linear_predictors(fitted.params, fitted.frame, validation)
    p = fitted.frame.link.inv(eta_p)
    r = p * mu - validation.y
    return float(r @ r / validation.n)


def _evaluate(fitted, validation):
    eta_p, _ = zm.linear_predictors(fitted.params, fitted.frame, validation)
    scores = fitted.frame.link.inv(eta_p)
    return (
        cv_loglik(fitted, validation),
        auc(scores, validation.zero_indicator.astype(int)),
        mse_nonzero(fitted, validation),
        mse_corrected(fitted, validation),
    )


# ---------------------------------------------------------------------------
# partitions


def draw_partition(rng, zero_indicator, nu: float, stratified: bool):
    """One train/validation split; stratified splits preserve the zero
    fraction to within one observation per stratum."""
    n = zero_indicator.size
    if stratified:
        val_parts = []
        for value in (0.0, 1.0):
            stratum = np.flatnonzero(zero_indicator == value)
            rng.shuffle(stratum)
            n_val = int(round(nu * stratum.size))
            if stratum.size >= 2:
                n_val = min(max(n_val, 1), stratum.size - 1)
            val_parts.append(stratum[:n_val])
        val = np.sort(np.concatenate(val_parts))
    else:
        perm = rng.permutation(n)
        val = np.sort(perm[: int(round(nu * n))])
    mask = np.zeros(n, dtype=bool)
    mask[val] = True
    train = np.flatnonzero(~mask)
    return train, val


def _fit_candidate(train, spec, base_cache, fit_options):
    unconstrained = spec.with_constraint(())
    base = None
    for cached_spec, cached_fit in base_cache:
        if cached_spec == unconstrained:
            base = cached_fit
            break
    if base is None:
        base = fitting.fit_unconstrained(train, unconstrained, **fit_options)
        base_cache.append((unconstrained, base))
    if not spec.constraint:
        return base
    return fitting.fit_constrained(train, spec, base=base, **fit_options)


def _run_replication(data, named_specs, cfg, seed_seq, fit_options):
    """Fit all candidates on one shared partition; None marks a dropped replication."""
    rng = np.random.default_rng(seed_seq)
    train_idx, val_idx = draw_partition(rng, data.zero_indicator, cfg.nu, cfg.stratified)
    train, val = data.take(train_idx), data.take(val_idx)
    out = []
    base_cache = []
    for _, spec in named_specs:
        try:
            fitted = _fit_candidate(train, spec, base_cache, fit_options)
            if not fitted.converged:
                return None
            out.append(_evaluate(fitted, val))
        except (ZinError, np.linalg.LinAlgError):
            return None
    return out


def _replication_worker(args):
    return _run_replication(*args)


def mccv(data: zm.Dataset, candidates, cfg: MccvConfig, *, n_jobs: int = 1,
         fit_options: dict | None = None) -> CvReport:
    """Monte Carlo cross-validation of candidate specs on shared partitions.

    ``candidates`` maps candidate names to ModelSpec objects (or is a sequence
    of (name, spec) pairs). A replication in which any candidate fails to fit
    or converge is dropped for every candidate, keeping comparisons paired;
    the dropped count is reported. Results are deterministic in (data, cfg)
    regardless of ``n_jobs``.
    """
    named_specs = list(candidates.items()) if hasattr(candidates, "items") else list(candidates)
    if len(named_specs) < 1:
        raise ValueError("need at least one candidate")
    fit_options = fit_options or {}
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.b)
    jobs = [(data, named_specs, cfg, child, fit_options) for child in children]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_replication_worker, jobs, chunksize=1))
    else:
        results = [_replication_worker(job) for job in jobs]

    n_cand = len(named_specs)
    values = np.full((n_cand, 4, cfg.b), np.nan)
    failed = 0
    for j, rep in enumerate(results):
        if rep is None:
            failed += 1
            continue
        for k, crit_vals in enumerate(rep):
            values[k, :, j] = crit_vals
    if failed == cfg.b:
        raise AllReplicationsFailed(f"all {cfg.b} MCCV replications failed")

    cand_results = tuple(
        CandidateResult(
            name=name,
            constrained_terms=tuple(sorted(spec.constraint.constrained_terms)),
            loglik=values[k, 0], auc=values[k, 1], mse=values[k, 2], mse_c=values[k, 3],
        )
        for k, (name, spec) in enumerate(named_specs)
    )
    means = [c.mean("loglik") for c in cand_results]
    selected = cand_results[int(np.argmax(means))].name
    return CvReport(candidates=cand_results, selected=selected,
                    failed_replications=failed, config=cfg)
