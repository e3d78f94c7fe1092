"""Command-line entry points: fit | select | simulate | predict."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import fitting, io, selection, simulate
from .config import load_config
from .errors import SchemaMismatch, ZinError


def _add_common(parser):
    parser.add_argument("--config", required=True, help="path to the YAML/JSON config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--output-dir", default=None, help="override the output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel worker processes")


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, mccv=replace(cfg.mccv, seed=args.seed))
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg


def cmd_fit(args) -> int:
    cfg = _load(args)
    loaded = io.load_csv(cfg.input_path, cfg)
    if cfg.model is None:
        raise ZinError("config must name the candidate to fit via 'model'")
    spec = cfg.candidate_specs()[cfg.model]
    options = dict(tol=cfg.fit.tol, max_iter=cfg.fit.max_iter)
    if spec.constraint:
        fitted = fitting.fit_constrained(loaded.dataset, spec, **options)
    else:
        fitted = fitting.fit_unconstrained(loaded.dataset, spec, **options)
    out = io.write_fit_outputs(fitted, cfg.output_dir, dropped_rows=loaded.dropped_rows)
    print(f"wrote fit outputs to {out}")
    if not fitted.converged:
        print("fit did not converge", file=sys.stderr)
        return 2
    return 0


def cmd_select(args) -> int:
    cfg = _load(args)
    loaded = io.load_csv(cfg.input_path, cfg)
    candidates = cfg.candidate_specs()
    if len(candidates) < 2:
        raise ZinError("select needs at least two candidates in the config")
    report = selection.mccv(
        loaded.dataset, candidates, cfg.mccv, n_jobs=args.jobs,
        fit_options=dict(tol=cfg.fit.tol, max_iter=cfg.fit.max_iter),
    )
    out = io.write_cv_report(report, candidates, cfg.output_dir)
    print(f"selected {report.selected} "
          f"({report.failed_replications} failed replications); outputs in {out}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load(args)
    sim = cfg.simulate
    if args.full or sim.full_study:
        sim = replace(sim, n=(200, 300, 400, 500, 600, 700, 800), sigma=(0.5, 1.0),
                      replications=simulate.FULL_STUDY_REPLICATIONS,
                      b=simulate.FULL_STUDY_B)
    configs = []
    for i, n in enumerate(sim.n):
        for j, sigma in enumerate(sim.sigma):
            mccv_cfg = selection.MccvConfig(b=sim.b, nu=sim.nu, seed=0,
                                            stratified=sim.stratified)
            configs.append(simulate.SimConfig(
                n=n, sigma=sigma, seed=cfg.seed + 1000 * i + j,
                replications=sim.replications, mccv=mccv_cfg,
            ))
    table = simulate.run_success_rate_study(configs, n_jobs=args.jobs)
    out = io.write_success_rates(table, cfg.output_dir)
    print(f"wrote success-rate study ({len(configs)} cells) to {out}")
    return 0


def cmd_predict(args) -> int:
    model = io.load_artifact(args.artifact)
    factor_names = list(model.frame.factor_levels)
    continuous = sorted({rep.name for pf in (model.frame.binary, model.frame.mean)
                         for rep in pf.smooths}
                        | {c for pf in (model.frame.binary, model.frame.mean)
                           for c, lev in pf.parametric_sources if lev is None})
    from .config import AnalysisConfig, FactorConfig, FitOptions, SimulateConfig

    pseudo = AnalysisConfig(
        input_path=args.data, response=None, response_transform="identity",
        delimiter=args.delimiter,
        factors=tuple(FactorConfig(name=n, levels=model.frame.factor_levels[n])
                      for n in factor_names),
        continuous=tuple(continuous),
        binary_parametric=(), binary_smooth=(), mean_parametric=(), mean_smooth=(),
        link=model.frame.spec.link, knots=9, knots_overrides={}, epsilon=None,
        candidates=(), model=None, mccv=selection.MccvConfig(), fit=FitOptions(),
        seed=0, output_dir=str(Path(args.output).parent), simulate=SimulateConfig(),
    )
    try:
        loaded = io.load_csv(args.data, pseudo, require_response=False)
        p, mu, ey = model.predict(loaded.dataset)
    except ValueError as exc:
        raise SchemaMismatch(str(exc)) from None
    except io.EmptyAfterFiltering:
        io.write_predictions(args.output, [], [], [])
        print(f"wrote 0 predictions to {args.output}")
        return 0
    io.write_predictions(args.output, p, mu, ey)
    print(f"wrote {len(p)} predictions to {args.output}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="zinreg",
        description="Semiparametric zero-inflated normal regression with "
                    "proportional constraints and MCCV model selection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit one candidate model and write its artifact")
    _add_common(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_sel = sub.add_parser("select", help="compare candidates by MCCV")
    _add_common(p_sel)
    p_sel.set_defaults(func=cmd_select)

    p_sim = sub.add_parser("simulate", help="criterion success-rate study")
    _add_common(p_sim)
    p_sim.add_argument("--full", action="store_true",
                       help="run the full-scale study (500 replications, B=100, "
                            "n = 200..800, sigma in {0.5, 1})")
    p_sim.set_defaults(func=cmd_simulate)

    p_pred = sub.add_parser("predict", help="predict p, mu, p*mu for new data")
    p_pred.add_argument("--artifact", required=True, help="artifact.json from fit")
    p_pred.add_argument("--data", required=True, help="covariate CSV")
    p_pred.add_argument("--output", default="predictions.csv")
    p_pred.add_argument("--delimiter", default=",")
    p_pred.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ZinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
