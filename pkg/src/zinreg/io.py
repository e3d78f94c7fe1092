"""CSV ingestion, fitted-model artifacts, and delimited table output.

Numbers destined for machine consumption are written with 17 significant
digits so a parse round-trips exactly; human-readable summaries are written
separately at 3 decimals.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fitting, splines
from . import model as zm
from .config import AnalysisConfig
from .errors import EmptyAfterFiltering, MissingColumn, UnparseableValue

MISSING_TOKENS = {"", "na", "nan", "null", "."}
ARTIFACT_VERSION = 1


def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return "NA"
        return format(x, ".17g")
    return str(x)


def _fmt3(x) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "NA"
    return format(x, ".3f") if isinstance(x, float) else str(x)


def write_table(path, header, rows, delimiter=","):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class LoadResult:
    dataset: zm.Dataset
    dropped_rows: int


def load_csv(path, config: AnalysisConfig, *, require_response: bool = True) -> LoadResult:
    """Read a delimited file into a typed Dataset.

    Rows with a missing value in any used column are dropped (complete-case)
    and counted. Unparseable or non-finite numeric cells raise
    UnparseableValue with row and column context.
    """
    used_factors = {f.name: f for f in config.factors}
    used_continuous = list(config.continuous)
    needed = list(used_factors) + used_continuous
    if require_response:
        if not config.response:
            raise MissingColumn("config declares no response column")
        needed.append(config.response)

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=config.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyAfterFiltering(f"{path} is empty") from None
        header = [h.strip() for h in header]
        for col in needed:
            if col not in header:
                raise MissingColumn(f"column {col!r} not found in {path}")
        index = {col: header.index(col) for col in needed}

        y_vals, fac_vals, cont_vals = [], {f: [] for f in used_factors}, {c: [] for c in used_continuous}
        dropped = 0
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            cells = {col: row[i].strip() if i < len(row) else "" for col, i in index.items()}
            if any(cells[col].lower() in MISSING_TOKENS for col in needed):
                dropped += 1
                continue
            parsed_cont = {}
            ok = True
            for col in used_continuous + ([config.response] if require_response else []):
                try:
                    val = float(cells[col])
                except ValueError:
                    raise UnparseableValue(
                        f"row {rownum}, column {col!r}: cannot parse {cells[col]!r}",
                        row=rownum, column=col,
                    ) from None
                if not math.isfinite(val):
                    raise UnparseableValue(
                        f"row {rownum}, column {col!r}: non-finite value {cells[col]!r}",
                        row=rownum, column=col,
                    )
                parsed_cont[col] = val
            if not ok:
                continue
            if require_response:
                yv = parsed_cont.pop(config.response)
                if config.response_transform == "log1p":
                    if yv <= -1.0:
                        raise UnparseableValue(
                            f"row {rownum}, column {config.response!r}: "
                            f"log1p undefined for {yv}",
                            row=rownum, column=config.response,
                        )
                    yv = math.log1p(yv)
                y_vals.append(yv)
            for col in used_continuous:
                cont_vals[col].append(parsed_cont[col])
            for col in used_factors:
                fac_vals[col].append(cells[col])

    n = len(next(iter(cont_vals.values()))) if cont_vals else len(y_vals)
    if n == 0:
        raise EmptyAfterFiltering(f"no usable rows remain in {path}")
    factors = {}
    for name, fc in used_factors.items():
        factors[name] = zm.Factor.from_strings(fac_vals[name], levels=fc.levels,
                                               reference=fc.reference)
    dataset = zm.Dataset(
        y=np.asarray(y_vals) if require_response else None,
        factors=factors,
        continuous={c: np.asarray(v) for c, v in cont_vals.items()},
    )
    return LoadResult(dataset=dataset, dropped_rows=dropped)


# ---------------------------------------------------------------------------
# fitted-model artifact


def _rep_to_dict(rep: zm.SmoothRep) -> dict:
    return {
        "name": rep.name,
        "knots": list(rep.basis.knot_set.knots),
        "scaled_domain": [rep.basis.knot_set.domain_lo, rep.basis.knot_set.domain_hi],
        "x_lo": rep.x_lo,
        "x_hi": rep.x_hi,
        "col_means": list(rep.col_means),
        "epsilon": rep.penalty.epsilon,
    }


def _rep_from_dict(d: dict) -> zm.SmoothRep:
    knot_set = splines.KnotSet(tuple(d["knots"]), *d["scaled_domain"])
    basis = splines.SplineBasis(knot_set)
    width = d["x_hi"] - d["x_lo"]
    pm = splines.penalty_matrix(basis)
    pm = splines.PenaltyMatrix(s=pm.s / width**3, epsilon=0.0)
    pm = splines.shrink_penalty(pm, d["epsilon"])
    return zm.SmoothRep(name=d["name"], basis=basis, x_lo=d["x_lo"], x_hi=d["x_hi"],
                        col_means=np.asarray(d["col_means"]), penalty=pm)


def _part_to_dict(pf: zm.PartFrame) -> dict:
    return {
        "parametric_labels": list(pf.parametric_labels),
        "parametric_sources": [list(s) for s in pf.parametric_sources],
        "smooths": [_rep_to_dict(rep) for rep in pf.smooths],
    }


def _part_from_dict(d: dict) -> zm.PartFrame:
    return zm.PartFrame(
        parametric_labels=tuple(d["parametric_labels"]),
        parametric_sources=tuple((c, lev) for c, lev in d["parametric_sources"]),
        smooths=tuple(_rep_from_dict(s) for s in d["smooths"]),
    )


def save_artifact(fitted: fitting.FittedZinModel, path, extra: dict | None = None):
    """Serialize the full fitted parameter state as JSON."""
    frame = fitted.frame
    spec = fitted.spec
    doc = {
        "format_version": ARTIFACT_VERSION,
        "link": spec.link,
        "constraint": sorted(spec.constraint.constrained_terms),
        "binary_part": _part_to_dict(frame.binary),
        "mean_part": _part_to_dict(frame.mean),
        "factor_levels": {k: list(v) for k, v in frame.factor_levels.items()},
        "binary_smooth_specs": [[s.name, s.n_knots] for s in spec.binary_part.smooths],
        "mean_smooth_specs": [[s.name, s.n_knots] for s in spec.mean_part.smooths],
        "binary_parametric": list(spec.binary_part.parametric),
        "mean_parametric": list(spec.mean_part.parametric),
        "params": {
            "beta0": fitted.params.beta0,
            "beta": fitted.params.beta,
            "gamma0": fitted.params.gamma0,
            "gamma": fitted.params.gamma,
            "smooths_h": {k: list(v) for k, v in fitted.params.smooths_h.items()},
            "smooths_s": {k: list(v) for k, v in fitted.params.smooths_s.items()},
            "deltas": {k: (v if math.isfinite(v) else None)
                       for k, v in fitted.params.deltas.items()},
            "sigma2": fitted.params.sigma2,
        },
        "lambdas": fitted.lambdas,
        "phis": fitted.phis,
        "eliminated": {
            "binary": sorted(n for n, t in fitted.smooth_binary.items() if t.eliminated),
            "mean": sorted(n for n, t in fitted.smooth_mean.items() if t.eliminated),
        },
        "loglik": fitted.loglik,
        "penalized_loglik": fitted.penalized_loglik,
        "converged": fitted.converged,
        "iterations": fitted.iterations,
        "n_obs": fitted.n_obs,
        "n_nonzero": fitted.n_nonzero,
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class PredictiveModel:
    """Artifact reloaded for prediction: parameters plus frame machinery."""

    params: zm.ZinParams
    frame: zm.ModelFrame
    meta: dict

    def predict(self, covariates: zm.Dataset):
        return zm.predict(self.params, self.frame, covariates)


def load_artifact(path) -> PredictiveModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    spec = zm.ModelSpec(
        binary_part=zm.PartSpec(
            parametric=tuple(doc["binary_parametric"]),
            smooths=tuple(zm.SmoothSpec(n, k) for n, k in doc["binary_smooth_specs"]),
        ),
        mean_part=zm.PartSpec(
            parametric=tuple(doc["mean_parametric"]),
            smooths=tuple(zm.SmoothSpec(n, k) for n, k in doc["mean_smooth_specs"]),
        ),
        link=doc["link"],
        constraint=zm.ConstraintSpec(frozenset(doc["constraint"])),
    )
    frame = zm.ModelFrame(
        spec=spec,
        binary=_part_from_dict(doc["binary_part"]),
        mean=_part_from_dict(doc["mean_part"]),
        factor_levels={k: tuple(v) for k, v in doc["factor_levels"].items()},
    )
    p = doc["params"]
    params = zm.ZinParams(
        beta0=p["beta0"], beta=dict(p["beta"]),
        gamma0=p["gamma0"], gamma=dict(p["gamma"]),
        smooths_h={k: np.asarray(v) for k, v in p["smooths_h"].items()},
        smooths_s={k: np.asarray(v) for k, v in p["smooths_s"].items()},
        deltas={k: (float("nan") if v is None else v) for k, v in p["deltas"].items()},
        sigma2=p["sigma2"],
    )
    return PredictiveModel(params=params, frame=frame, meta=doc)


# ---------------------------------------------------------------------------
# fit outputs


def write_fit_outputs(fitted: fitting.FittedZinModel, out_dir, grid_points: int = 200,
                      dropped_rows: int = 0):
    """Write the artifact plus coefficient/smooth/delta tables and band grids."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = fitting.inference_report(fitted)

    save_artifact(fitted, out / "artifact.json", extra={"dropped_rows": dropped_rows})

    write_table(out / "coefficients.csv",
                ["part", "term", "estimate", "se", "p_value"],
                [(r.part, r.label, r.estimate, r.se, r.p_value)
                 for r in report.coefficients])

    smooth_rows = []
    for r in report.smooths:
        status = "constrained" if r.constrained else ("eliminated" if r.eliminated else "fitted")
        smooth_rows.append((r.part, r.name,
                            float("nan") if r.eliminated else r.edf,
                            r.f_stat, r.p_value, status))
    write_table(out / "smooths.csv",
                ["part", "term", "edf", "f_stat", "p_value", "status"], smooth_rows)

    if report.deltas:
        write_table(out / "deltas.csv", ["term", "estimate", "se", "identified"],
                    [(r.name, r.estimate, r.se, r.identified) for r in report.deltas])

    grid_rows = []
    for part, terms in (("binary", fitted.smooth_binary), ("mean", fitted.smooth_mean)):
        for name, term in terms.items():
            grid = np.linspace(term.rep.x_lo, term.rep.x_hi, grid_points)
            if term.eliminated:
                est = lo = hi = np.zeros(grid_points)
            else:
                est, lo, hi = fitting.confidence_band(fitted, part, name, grid)
            for x, a, b, c in zip(grid, est, lo, hi):
                grid_rows.append((part, name, x, a, b, c, term.eliminated))
    write_table(out / "grids.csv",
                ["part", "term", "x", "estimate", "lower", "upper", "eliminated"],
                grid_rows)

    _write_summary(out / "summary.txt", fitted, report, dropped_rows)
    return out


def _write_summary(path, fitted, report, dropped_rows):
    lines = []
    lines.append("Zero-inflated normal fit")
    lines.append(f"observations: {fitted.n_obs} ({fitted.n_nonzero} nonzero), "
                 f"dropped rows: {dropped_rows}")
    lines.append(f"converged: {fitted.converged} (iterations: {fitted.iterations})")
    lines.append(f"log-likelihood: {_fmt3(fitted.loglik)}   "
                 f"penalized: {_fmt3(fitted.penalized_loglik)}")
    lines.append(f"sigma2: {_fmt3(report.sigma2)} (se {_fmt3(report.sigma2_se)})")
    lines.append("")
    lines.append("coefficients (estimate / se / p):")
    for r in report.coefficients:
        lines.append(f"  {r.part:6s} {r.label:20s} {_fmt3(r.estimate):>10s} "
                     f"{_fmt3(r.se):>10s} {_fmt3(r.p_value):>10s}")
    lines.append("")
    lines.append("smooth terms (edf / F / p):")
    for r in report.smooths:
        if r.eliminated:
            edf = fstat = p = "NA"
        else:
            edf, fstat, p = _fmt3(r.edf), _fmt3(r.f_stat), _fmt3(r.p_value)
        tag = " (constrained)" if r.constrained else ""
        lines.append(f"  {r.part:6s} {r.name:20s} {edf:>10s} {fstat:>10s} {p:>10s}{tag}")
    if report.deltas:
        lines.append("")
        lines.append("proportionality parameters (estimate / se):")
        for r in report.deltas:
            if r.identified:
                lines.append(f"  {r.name:20s} {_fmt3(r.estimate):>10s} {_fmt3(r.se):>10s}")
            else:
                lines.append(f"  {r.name:20s} {'NA':>10s} {'NA':>10s} (unidentified)")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# selection and study outputs


def write_cv_report(report, candidates, out_dir):
    """Candidate-comparison table with constraint flags and the four criteria."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_terms = sorted({t for _, spec in candidates.items()
                        for t in spec.binary_part.smooth_names()})
    header = (["model"] + [f"constrained_{t}" for t in all_terms]
              + ["loglik", "auc", "mse", "mse_c", "failed", "selected"])
    rows = []
    for cand in report.candidates:
        flags = ["yes" if t in cand.constrained_terms else "no" for t in all_terms]
        rows.append([cand.name] + flags + [
            cand.mean("loglik"), cand.mean("auc"), cand.mean("mse"), cand.mean("mse_c"),
            report.failed_replications,
            "yes" if cand.name == report.selected else "no",
        ])
    write_table(out / "cv_report.csv", header, rows)

    detail_rows = []
    for cand in report.candidates:
        for j in range(report.config.b):
            detail_rows.append((cand.name, j, cand.loglik[j], cand.auc[j],
                                cand.mse[j], cand.mse_c[j]))
    write_table(out / "cv_replications.csv",
                ["model", "replication", "loglik", "auc", "mse", "mse_c"], detail_rows)
    return out


def write_success_rates(table, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["n", "sigma", "replications", "loglik", "auc", "mse", "mse_c",
              "gap_loglik", "gap_auc", "gap_mse", "gap_mse_c"]
    rows = []
    for cell in table.cells:
        rows.append([cell.n, cell.sigma, cell.replications]
                    + [cell.success[c] for c in ("loglik", "auc", "mse", "mse_c")]
                    + [cell.gaps[c] for c in ("loglik", "auc", "mse", "mse_c")])
    write_table(out / "success_rates.csv", header, rows)

    detail = []
    for cell in table.cells:
        for j, row in enumerate(cell.detail):
            detail.append([cell.n, cell.sigma, j] + list(row))
    write_table(out / "study_replications.csv",
                ["n", "sigma", "replication",
                 "con_loglik", "con_auc", "con_mse", "con_mse_c",
                 "unc_loglik", "unc_auc", "unc_mse", "unc_mse_c"], detail)
    return out


def write_predictions(path, p, mu, ey):
    write_table(path, ["p_hat", "mu_hat", "ey_hat"], zip(p, mu, ey))
